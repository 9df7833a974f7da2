//! Dataset loading, synthetic data and checkpoint files.

pub mod checkpoint;
pub mod dataset;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use dataset::{load_dataset, save_raw, DatasetFormat, ImageDataset, Split};
pub use synthetic::{make_synthetic_dataset, SyntheticSpec};
