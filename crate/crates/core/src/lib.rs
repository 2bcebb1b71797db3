pub mod adversarial;
pub mod data;
pub mod diffcore;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod memory;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
