//! Dual-stream audio-visual masked autoencoder with complementary masking,
//! inter-modal contrastive learning and symmetric-KL self-distillation.

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod masking;
pub mod model;
pub mod patchio;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
