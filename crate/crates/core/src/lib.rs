//! Prompt-conditioned detection with point-to-box teachers and
//! pseudo-label driven student training.

pub mod attention;
pub mod autograd;
pub mod click_moe;
pub mod datasets;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod prompt_codec;
pub mod tensor;
pub mod train_engine;

pub use error::{Error, Result};
