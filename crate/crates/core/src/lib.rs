//! Frequency-enhanced decomposed encoder-decoder forecasting, from scratch.

pub mod analysis;
pub mod autograd;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod contract;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod spectral;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
