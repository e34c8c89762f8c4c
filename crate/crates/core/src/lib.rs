pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod optim;
pub mod reports;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{DataSpec, ModelConfig, Precision, RunSpec, TrainConfig, Variant};
pub use data::{EmbeddingDataset, EmbeddingSequenceFile, SplitName};
pub use error::{Error, FormatError, Result};
pub use graph::{Graph, Var};
pub use model::ModelState;
pub use tensor::{Tensor, TensorError};
