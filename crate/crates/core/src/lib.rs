pub mod action;
pub mod discrete;
pub mod env;
pub mod error;
pub mod grad;
pub mod harness;
pub mod policy;
pub mod quant;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = grad::Tensor<f64>;
pub type Graph = grad::Graph<f64>;
pub type ParamStore = grad::ParamStore<f64>;
pub type AdamW = grad::AdamW<f64>;
pub type Action = action::Action<f64>;
pub type ResidualCodec = quant::ResidualCodec<f64>;
pub type Policy = policy::Policy<f64>;
pub type Binding = policy::Binding<f64>;
pub type Sequence = policy::Sequence<f64>;
pub type PolicyCheckpoint = policy::PolicyCheckpoint<f64>;
