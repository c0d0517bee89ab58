pub mod data;
pub mod optim;
pub mod trainer;

pub use data::{sample_batch, sample_patch, SamplePair, TrainImage, TrainingSet};
pub use optim::{schedule, Adam, TrainConfig};
pub use trainer::{train_loop, RunFiles, StepLog, Trainer};
