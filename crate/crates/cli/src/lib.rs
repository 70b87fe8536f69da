//! Stage runner for the land-cover pipeline. Each stage writes into its own
//! workdir directory together with a manifest of input digests and parameters.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{parse_override, InputPaths, PipelineConfig};
pub use error::CliError;
pub use stages::{label_raster, run_all, run_stage, Stage, StageOutcome};
