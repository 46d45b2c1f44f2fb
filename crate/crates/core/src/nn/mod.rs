//! The neural sequence labeler and the automatic differentiation it is
//! trained with.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use model::{class_weights, loss, Arch, Mode, ModelConfig, PosteriorMatrix, SequenceModel};
pub use tensor::{Mat, Real};
