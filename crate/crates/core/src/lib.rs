//! Learned continuous position assignment for rotary attention.

pub mod analysis;
pub mod error;
pub mod model;
pub mod positioning;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub use model::{Model, ModelConfig, Schedule, TokenId};
pub use positioning::{PositionMode, PositionTrace};
pub use tensor::Tensor;
pub use trainer::{EvalReport, TrainConfig};
