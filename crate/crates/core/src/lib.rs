//! Reconstruction of low-frequency physiological signals (respiratory volume
//! and heart rate) from ROI-averaged fMRI time series with windowed
//! self-attention models.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod scalar;
pub mod signal;
pub mod synth;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Series64 = signal::SampledSeries<f64>;
