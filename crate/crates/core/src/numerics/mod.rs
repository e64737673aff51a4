//! Dense tensors, reverse-mode differentiation and the training primitives
//! built on them.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use graph::{EntropyTerms, Gradients, Graph, PatchLayout, Var};
pub use params::{clip_global_norm, AdamW, ParamId, ParamStore, Schedule};
pub use tensor::{Real, Tensor};
