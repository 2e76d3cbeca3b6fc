//! Networks, training loop, evaluation and file formats.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod nn;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Activation, ModelConfig, QuantizerKind};
pub use data::{make_synthetic_dataset, Dataset};
pub use model::{build_model, Model};
pub use train::{evaluate, train, EvalReport, MetricsRecord, TrainError, TrainRun};
