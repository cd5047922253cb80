//! Experiment harness: JSON configuration, synthetic dataset assembly,
//! training and sampling commands, the ablation grid and SVG charts.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod plot;

pub use config::{Conditioning, ExperimentConfig, Variant};
pub use error::{CliError, CliResult};
pub use pipeline::Layout;
