//! Low-bit weight quantization through a differentiable Gaussian-mixture
//! projection, trained end-to-end against the task loss, plus a bit-packed
//! codebook runtime for deployment.
//!
//! The pipeline: train an FP32 model ([`train`]), attach per-layer mixture
//! state initialized by k-means ([`gm`]), co-tune weights and mixture with
//! SGD through the soft projection ([`autodiff`]), evaluate and account
//! compression with the hard projection ([`metrics`]), then export packed
//! index streams with extended codebooks ([`pack`]) and run them through
//! portable kernels ([`kernels`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gm;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pack;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
