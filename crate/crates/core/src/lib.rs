pub mod attention;
pub mod cells;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod scoring;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use config::KvConfig;
pub use error::{Result, VadError};
pub use losses::LossConfig;
pub use model::{build_model, Direction, Model, ModelConfig, PredictionSet};
pub use tensor::{Real, Tensor};
