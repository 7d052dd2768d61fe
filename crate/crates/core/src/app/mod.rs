//! Operational surface: configuration, experiment grids, checkpoints and
//! diagnostics driven by the CLI.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod experiment;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{Cell, ConfigError, ExperimentConfig, Grid};
pub use diagnostics::{gradcheck_suite, theorem1_samples, AngleSample, GradcheckReport};
pub use experiment::{read_records, run_experiment, summary_table, CellRecord, ExperimentError};
