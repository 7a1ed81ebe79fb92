//! Salient-object detection: a hybrid dilated-convolution and self-attention
//! network, its deeply supervised foreground/background objective, dataset
//! preparation, evaluation measures and a training harness.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
