//! A minimal differentiable numerical core for grid-to-sequence forecasting
//! models: dense f32 tensors, a tape-recording session with reverse-mode
//! backward, the handful of ops the pipeline needs (2-D convolution, batch
//! norm, LSTM cells, embeddings, reductions), plain SGD, and a
//! finite-difference gradient checker.
//!
//! Design constraints, in order: correctness over generality, deterministic
//! single-threaded execution, f32 storage with f64 accumulation inside every
//! reduction.

mod error;
pub mod gradcheck;
pub mod nn;
mod ops;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{ParamId, ParameterSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Session, ValId, BN_EPS, BN_MOMENTUM};
pub use tensor::{Shape, Tensor};
