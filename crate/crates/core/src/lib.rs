//! Motion-gated single-shot object detection for video, with evolutionary
//! network compression.

pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod evolve;
pub mod motion;
pub mod netdef;
pub mod nn;
pub mod pipeline;
pub mod ppm;
pub mod synth;
pub mod tensor;
pub mod tiny;

pub use error::{Error, Result};
pub use tensor::{Activation, Tensor};
