//! Latent-space generative design of discrete sequences over synthetic
//! fitness landscapes.
//!
//! The pipeline: compress one-hot-ish sequence embeddings into a small latent
//! box with a β-regularized autoencoder, learn a fitness-conditioned velocity
//! field in that latent space by flow matching, integrate it with an Euler
//! solver under classifier-free guidance, and decode the result back into
//! sequences. A self-augmentation round feeds high-target samples back into
//! flow training. Everything is seeded and bitwise reproducible.
//!
//! Layout:
//! * [`numcore`] — tensors, reverse-mode autodiff, Adam, checkpoints (generic
//!   over the scalar type; the aliases below pin f64 for the pipeline).
//! * [`seqkit`] — vocabularies, sequences, edit-distance metrics.
//! * [`landscape`] — synthetic epistatic fitness landscapes, benchmark
//!   subsets, and the surrogate ranking model.
//! * [`latentcodec`] — the sequence ↔ latent autoencoder.
//! * [`flowmatch`] — velocity model, flow-matching loss, guided Euler sampler.
//! * [`bootstrap`] — self-augmentation of the training set.
//! * [`harness`] — experiment configs, the end-to-end protocol, CLI plumbing.

pub mod error;
pub mod numcore;

pub mod seqkit;

pub mod landscape;

pub mod latentcodec;

pub mod flowmatch;

pub mod bootstrap;

pub mod harness;

pub use error::{Error, Result};

/// Concrete f64 instantiations used by the whole pipeline.
pub type Tensor = numcore::Tensor<f64>;
pub type Tape = numcore::Tape<f64>;
pub type ParamStore = numcore::ParamStore<f64>;
pub type Gradients = numcore::Gradients<f64>;
