//! Experiment harness for the adaptive latent fusion codec: configuration,
//! synthetic data, cached training pipeline, held-out sweeps over τ and
//! sampler steps, SVG reports and self-checks. The `alf` binary is a thin
//! command-line front end over this library.

pub mod checks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{run_pipeline, run_stages, Layout, RunManifest, Stage};
pub use report::report;
pub use sweep::{sweep, SweepOutput, SweepPlan, SweepRow};
