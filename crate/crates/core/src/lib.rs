//! Sound event localization and detection with meta-learned fast adaptation.

pub mod autodiff;
pub mod config;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sine;
pub mod study;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
