//! Numeric core: tensors, reverse-mode autodiff, Adam, checkpoints.
//!
//! Generic over the scalar width via [`Scalar`]; the rest of the crate uses
//! the f64 aliases exported from the crate root.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use params::{AdamParams, Binding, ParamStore};
pub use rng::{derive_seed, stream, DetRng};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
