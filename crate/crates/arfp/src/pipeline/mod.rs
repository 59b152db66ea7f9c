//! Experiment orchestration: dataset handling, configuration, persistence,
//! canned evaluation protocols, and report emission.

pub mod dataset;
pub mod imgio;

pub use dataset::{load_dataset, split_reference_probe, Dataset, DatasetSource, DatasetSpec};
