//! Minimal reverse-mode automatic differentiation: tensors, the tape, an
//! AdamW optimizer and a few layers.

mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule};
pub(crate) use params::{get_f32s, get_u32, put_f32s, put_u32};
pub use params::{Bound, ParamId, ParamStore, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
