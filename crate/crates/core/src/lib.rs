//! A branch-parallel vision transformer.
//!
//! `N` branches of `L` layers each read the same patch embedding `X₀`; a
//! linear aggregator sums per-branch pooled features into class logits.
//! Stage `i` uses only branches `1..=i`, which is what the progressive
//! trainer, prefix compression and the parallel runtime build on.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod layer;
pub mod lifecycle;
pub mod model;
pub mod ops;
pub mod optim;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Activation, DType, Scalar, Tensor};
