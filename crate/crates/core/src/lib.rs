//! Lightweight super-resolution networks built on a small reverse-mode
//! autograd engine.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod ops;
pub mod profiler;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use model::{Model, ModelConfig};
pub use tensor::{Element, Shape, Tensor};
