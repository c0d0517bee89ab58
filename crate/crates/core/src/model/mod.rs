pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod network;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::{ActivationKeep, BlockKind, ModelConfig, PoolMode, Tap};
pub use network::Model;
