//! Egocentric human pose estimation and forecasting.

pub mod checkpoint;
pub mod error;
pub mod estimator;
pub mod forecaster;
pub mod harness;
pub mod metrics;
pub mod pose;
pub mod provider;
pub mod seqio;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
