//! Finite-difference verification of analytic gradients.
//!
//! Central differences, every coordinate of every parameter in the store.
//! Expensive by construction — call it on miniature models only.

use std::collections::BTreeMap;

use crate::error::Result;

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Maximum relative error between analytic gradients and central differences.
///
/// `f` evaluates the loss and its analytic gradients for the current store
/// contents. It is re-invoked with each coordinate of each parameter perturbed
/// by ±h; the analytic gradient from the *unperturbed* call is compared
/// against `(f(θ+h) − f(θ−h)) / 2h` with relative error normalized by
/// `max(1, |central|)`. Any non-finite comparison yields +∞ so it can never
/// masquerade as a pass.
pub fn finite_diff_check<S: Scalar>(
    store: &mut ParamStore<S>,
    mut f: impl FnMut(&ParamStore<S>) -> Result<(S, BTreeMap<String, Tensor<S>>)>,
    h: f64,
) -> Result<f64> {
    let (_, analytic) = f(store)?;
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let n = store.get(name).expect("name from store").numel();
        for i in 0..n {
            let orig = store.get(name).unwrap().data()[i];
            let hs = S::from_f64(h);

            store.get_mut(name).unwrap().data_mut()[i] = orig + hs;
            let up = f(store)?.0.as_f64();
            store.get_mut(name).unwrap().data_mut()[i] = orig - hs;
            let down = f(store)?.0.as_f64();
            store.get_mut(name).unwrap().data_mut()[i] = orig;

            let central = (up - down) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i].as_f64());
            let err = if central.is_finite() && a.is_finite() {
                (a - central).abs() / central.abs().max(1.0)
            } else {
                f64::INFINITY
            };
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
