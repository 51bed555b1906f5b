//! Grid-based air pollution forecasting pipeline.
//!
//! The crate walks raw station records through a fixed sequence of stages:
//! ingestion and rasterization onto an hourly city grid ([`gridstore`]),
//! temporal interpolation plus correlation-gated spatial fill ([`interp`]),
//! patch-based CNN-LSTM forecasting models ([`model`]), training with
//! early stopping ([`trainer`]), and metric evaluation ([`evaluator`]).
//! [`synthcity`] generates synthetic city datasets with known dynamics so
//! model comparisons run at desk scale.

pub mod error;
pub mod evaluator;
pub mod gridstore;
pub mod interp;
pub mod model;
pub mod synthcity;
pub mod trainer;

pub use error::{Error, Result};
