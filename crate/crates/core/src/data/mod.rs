//! Synthetic image data and the pretext tasks built on it.

pub mod dataset;
pub mod tasks;

pub use dataset::{generate_dataset, Image, Split, SplitSizes, SyntheticDataset};
pub use tasks::{Batch, LossKind, ProxyTaskSpec, PseudoLabels, TaskKind};
