//! Diffusion-based synthesis of multivariate time series.
//!
//! The denoiser is a 1-D U-Net whose blocks mix several dilated
//! convolutions through learned softmax weights, with a single
//! self-attention layer at the bottleneck. Around it sit the noise
//! schedule, training and sampling loops, data preparation, evaluation
//! metrics and a downstream classifier experiment.

pub mod attention;
pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod msconv;
pub mod ndgrad;
pub mod schedule;
pub mod seeds;
pub mod unet;
pub mod utility;

pub use error::{Error, ErrorKind, Result};
pub use ndgrad::{Real, Tensor};
