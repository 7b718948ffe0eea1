//! Cross-utterance conditioned VAE speech synthesis and editing.

pub mod audio;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod editing;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod vae;

pub use error::{Error, Result};
