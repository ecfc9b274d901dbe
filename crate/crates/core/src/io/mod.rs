//! Datasets, synthetic data, checkpoints, visualisation and config files.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ppm;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::KvConfig;
pub use dataset::{load_cifar_binary, load_dataset, parse_cifar, Dataset, SampleMeta, SizeClass};
pub use ppm::{encode_ppm, render_mask, visualize_mask};
pub use synthetic::{gen_synthetic, DifficultyMix, SHAPES};
