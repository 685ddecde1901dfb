//! Experiment harness for random layer sampling ensembles: JSON configs,
//! keyed seed streams, training and attack runs, diversity metrics and
//! static reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod seeds;

pub use config::{ArchitectureSpec, DataSource, DatasetSpec, DefenseConfig, ExperimentConfig};
pub use error::{HarnessError, Result, Stage};
pub use experiment::{diversity_report, run_experiment, sweep_k, AccuracyRow, DiversityMetrics, RunMetrics};
pub use report::emit_report;
pub use seeds::{seed_streams, SeedStreams};
