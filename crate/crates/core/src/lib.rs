//! Stable Koopman models: a reverse-mode autodiff tape, a hypercube barrier
//! certificate for linear maps, barrier-relaxed projected training, EDMD
//! baselines and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod edmd;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod stability;
pub mod trainer;

pub use autodiff::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use linalg::DenseMatrix;
