//! Unsupervised domain adaptation for semantic segmentation by mixing
//! labelled source images with pseudo-labelled target images, on a small
//! procedurally generated road-scene benchmark.
//!
//! The pipeline: [`synthgen`] renders the source/target domains, [`storage`]
//! persists them, [`model`] is a three-layer convolutional segmenter,
//! [`mix`] builds ClassMix/CutMix/CowMix masks, [`trainer`] runs the
//! variants, and [`metrics`] scores them.

pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod mix;
pub mod model;
pub mod optim;
pub mod seeding;
pub mod storage;
pub mod synthgen;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use grid::{ImageBatch, LabelMap, MixMask, ProbMap, IGNORE};
pub use metrics::{ConfusionMatrix, IouReport};
pub use mix::{MixStrategy, PhotometricConfig};
pub use model::{Architecture, SegModel};
pub use synthgen::{Benchmark, BenchmarkConfig, Dataset, Split};
pub use trainer::{RunOptions, RunReport, TrainConfig, Variant};
