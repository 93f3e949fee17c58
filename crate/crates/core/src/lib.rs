//! Phrase-level retrieval-augmented multimodal translation at desk scale.

pub mod data;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod latent;
pub mod retrieval;
pub mod translator;

pub use error::{Error, Result};
