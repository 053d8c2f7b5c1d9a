//! Iterative optical-flow refinement with self-cleaning iterations and a
//! regression focal loss, on a small reverse-mode autodiff core.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flow::{FlowField, SciMap};
pub use model::{FlowModel, IterationTrace, ModelConfig};
pub use tensor::{Element, Tensor};
