//! Minimal reverse-mode differentiation over dense arrays, with the Adam
//! optimizer, gradient clipping, a finite-difference checker and a binary
//! checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use params::{clip_global_norm, Gradients, ParamEntry, ParamId, ParamStore, Partition};
pub use tensor::{DType, Real, Tensor};
