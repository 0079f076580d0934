pub mod capsnet;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod rng;
pub mod training;
pub mod tensor;

pub use capsnet::{CapsNet, ModelConfig, RoutingMode};
pub use error::{Error, Result};
pub use tensor::{AdamState, Gradients, Init, Tape, Tensor, Var};
