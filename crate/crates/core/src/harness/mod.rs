//! Configuration-driven experiments, run manifests and reports.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod report;

pub use config::{ExperimentConfig, ExperimentKind, OUTPUT_ROOT_ENV};
pub use experiments::{run_config, run_experiment};
pub use manifest::{RunManifest, MANIFEST_NAME};
pub use report::emit_report;
