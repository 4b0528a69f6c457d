//! Datasets, run configuration and the decoder training loop.

pub mod config;
pub mod dataset;
pub mod run;
pub mod train;

pub use config::TrainConfig;
pub use dataset::{load_annotations, synth_dataset, DatasetFormat, HoiDataset};
pub use train::train;
