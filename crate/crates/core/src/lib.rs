//! Categorical user-sequence compression for generative recommendation.
//!
//! Long user histories are split into a distant history and a recent
//! window. The history is grouped into per-category buckets, the most
//! recent buckets are kept, and each bucket is pooled into one token that
//! is prepended to the recent interleaved item/action sequence of a small
//! causal transformer. The crate carries the data pipeline, compressor,
//! K-Means category induction, an autodiff tensor engine, the model and
//! training loop, ranking metrics, and an analytic/wall-clock cost model.

pub mod cli;
pub mod cluster;
pub mod compressor;
pub mod datalog;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod perfbench;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Tensor32, Tensor64, Var};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
