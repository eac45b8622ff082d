//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64`. A [`Graph`] records ops as they run; [`Graph::backward`]
//! replays them in reverse. Parameters live in [`ParamStore`]s and are put on
//! a fresh graph for every step with [`ParamStore::bind`].

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Reduction, Var};
pub use optim::{collect_grads, Adam, Bound, Param, ParamStore, Sgd};
pub use tensor::Tensor;

/// Default guard for `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("dimension error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, AdError>;
