//! Generative speech separation over discrete codec tokens.

pub mod codec;
pub mod container;
pub mod decoding;
pub mod error;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod sot;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
