//! Spatial contrastive pre-training and few-shot evaluation on a small
//! tape-based autodiff engine.

pub mod analysis;
mod binio;
pub mod checkpoint;
pub mod data;
mod error;
pub mod fewshot;
pub mod kv;
pub mod losses;
pub mod model;
pub mod pretrain;
pub mod protonet;
pub mod rng;

pub use error::{Error, Result};
pub use scl_autodiff as autodiff;
