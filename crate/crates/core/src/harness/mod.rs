//! Experiment harness: dataset generation and splitting, configuration,
//! checkpoint persistence, metric files, plotting, stage orchestration and
//! the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod plot;

pub use config::{ExperimentConfig, Overrides, RawConfig};
pub use dataset::{Appearance, Dataset, DatasetKind, DatasetSpec, DatasetSplit};
pub use pipeline::StageResult;
