//! Named parameter storage and the Adam optimizer.
//!
//! A `ParamStore` maps names to tensors plus per-parameter Adam moments. The
//! map is a `BTreeMap` on purpose: every iteration (binding onto a tape,
//! optimizer sweeps, checkpoint serialization) visits parameters in sorted
//! name order, which is one of the pillars of bitwise reproducibility here.
//!
//! Freezing is expressed by omission: a training loop updates exactly the
//! parameters whose gradients it collects. Entries that never appear in an
//! `adam_step` gradient map keep value, moments, and step counter untouched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// AdamW hyper-parameters. `weight_decay = 0` (the default) gives plain Adam.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
struct Entry<S: Scalar> {
    value: Tensor<S>,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, Entry<S>>,
}

/// Name → tape var map produced by [`ParamStore::bind`].
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {:?} not bound — model/store mismatch", name))
    }

    /// Collect gradients for every bound parameter whose name passes `filter`.
    /// Parameters off the loss path come back as zero tensors.
    pub fn collect<S: Scalar>(
        &self,
        tape: &Tape<S>,
        grads: &Gradients<S>,
        filter: impl Fn(&str) -> bool,
    ) -> BTreeMap<String, Tensor<S>> {
        self.vars
            .iter()
            .filter(|(name, _)| filter(name))
            .map(|(name, &var)| (name.clone(), tape.grad_tensor(grads, var)))
            .collect()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let n = value.numel();
        let old = self
            .entries
            .insert(name.into(), Entry { value, m: vec![S::zero(); n], v: vec![S::zero(); n], step: 0 });
        debug_assert!(old.is_none(), "parameter inserted twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn num_coords(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn step_of(&self, name: &str) -> Option<u64> {
        self.entries.get(name).map(|e| e.step)
    }

    /// Record every parameter as a leaf on `tape` (sorted name order).
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let v = tape.input(e.value.clone()).expect("params are non-empty");
                (name.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// One bias-corrected AdamW step over exactly the entries named in `grads`.
    ///
    /// Unnamed entries are untouched (that is how freezing works); a gradient
    /// for an unknown name or with a non-finite value is an error that names
    /// the parameter.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<S>>, hp: &AdamParams) -> Result<()> {
        let (b1, b2) = (S::from_f64(hp.beta1), S::from_f64(hp.beta2));
        let (lr, eps, wd) =
            (S::from_f64(hp.lr), S::from_f64(hp.eps), S::from_f64(hp.weight_decay));
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {:?}", name)))?;
            if g.shape() != e.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} vs parameter {:?} for {:?}", g.shape(), e.value.shape(), name),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { context: format!("gradient of {:?}", name) });
            }
            e.step += 1;
            let t = e.step as i32;
            let c1 = S::one() - b1.powi(t);
            let c2 = S::one() - b2.powi(t);
            for ((th, &gi), (m, v)) in
                e.value.data_mut().iter_mut().zip(g.data()).zip(e.m.iter_mut().zip(e.v.iter_mut()))
            {
                *m = b1 * *m + (S::one() - b1) * gi;
                *v = b2 * *v + (S::one() - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *th = *th - lr * (mhat / (vhat.sqrt() + eps) + wd * *th);
            }
        }
        Ok(())
    }

    /// Flat view of the values for serialization.
    pub fn to_named(&self) -> BTreeMap<String, Tensor<S>> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.value.clone())).collect()
    }

    /// Rebuild a store from named tensors; optimizer state starts fresh.
    pub fn from_named(named: BTreeMap<String, Tensor<S>>) -> Self {
        let mut s = ParamStore::new();
        for (k, v) in named {
            s.insert(k, v);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_roughly_lr_sized() {
        // f(θ) = θ² at θ = 1 with lr 0.1: bias correction makes the first
        // update ≈ lr · sign(g), so θ drops to ≈ 0.9.
        let mut store = ParamStore::<f64>::new();
        store.insert("theta", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("theta".to_string(), Tensor::scalar(2.0));
        store.adam_step(&grads, &AdamParams::with_lr(0.1)).unwrap();
        let theta = store.get("theta").unwrap().item().unwrap();
        assert!((theta - 0.9).abs() < 1e-6, "theta = {}", theta);
        assert_eq!(store.step_of("theta"), Some(1));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("theta", Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
        let hp = AdamParams::with_lr(0.05);
        for _ in 0..400 {
            let th = store.get("theta").unwrap().clone();
            let g = Tensor::new(vec![2], th.data().iter().map(|&x| 2.0 * x).collect()).unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("theta".to_string(), g);
            store.adam_step(&grads, &hp).unwrap();
        }
        for &x in store.get("theta").unwrap().data() {
            assert!(x.abs() < 1e-2, "did not converge: {}", x);
        }
    }

    #[test]
    fn unnamed_entries_are_bitwise_untouched() {
        let mut store = ParamStore::<f64>::new();
        store.insert("frozen.w", Tensor::new(vec![2], vec![0.123456789, -9.87]).unwrap());
        store.insert("live.w", Tensor::scalar(1.0));
        let before = store.get("frozen.w").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert("live.w".to_string(), Tensor::scalar(0.5));
        store.adam_step(&grads, &AdamParams::default()).unwrap();
        let after = store.get("frozen.w").unwrap();
        assert!(before
            .data()
            .iter()
            .zip(after.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(store.step_of("frozen.w"), Some(0));
        assert_eq!(store.step_of("live.w"), Some(1));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f64::NAN));
        let err = store.adam_step(&grads, &AdamParams::default()).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{}", err);
    }

    #[test]
    fn binding_collects_zeros_for_offpath_params() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(3.0));
        let mut tape = Tape::<f64>::new();
        let bind = store.bind(&mut tape);
        let a = bind.var("a");
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        let collected = bind.collect(&tape, &g, |_| true);
        assert_eq!(collected["a"].data(), &[4.0]);
        assert_eq!(collected["b"].data(), &[0.0]);
    }
}
