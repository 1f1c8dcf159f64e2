//! Desk-scale supervised learning: dataset synthesis and ingestion,
//! i.i.d. / label-skew partitioning, a small MLP, and H-step local SGD
//! producing model differences.

mod dataset;
mod model;

pub use dataset::{partition, synthesize_dataset, Dataset, PartitionMode};
pub use model::{local_sgd, ModelSpec};
