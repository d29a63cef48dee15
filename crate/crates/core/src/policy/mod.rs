//! A small decoder-only transformer that reads an instruction and a window
//! of observations and emits actions through a bound adapter.

mod checkpoint;
mod model;

pub use checkpoint::{
    sha256_hex, ArtifactRef, CheckpointHeader, PolicyCheckpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{ActOutput, Binding, Decoding, Layout, Policy, PolicyConfig, Sequence};
