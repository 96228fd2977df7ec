//! Desk-scale split learning: model, data and the training loop.

pub mod data;
pub mod model;
pub mod train;

pub use data::{load_idx, load_mnist_dir, partition, synthesize_blobs, Dataset, DatasetSpec, PartitionMode};
pub use model::{ModelShape, SplitModel};
pub use train::{evaluate, train, Compressor, IterationRecord, TrainingConfig, TrainingTrace};
