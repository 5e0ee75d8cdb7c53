//! Reproducible experiments: configuration, result tables and commands.

pub mod commands;
pub mod config;
pub mod table;

pub use commands::{
    cmd_ablate, cmd_corrupt_recover, cmd_eval, cmd_generate, cmd_refine, cmd_report, cmd_train, derive_seed,
    load_model, run_ablate, run_corrupt_recover, run_refine, variant_label, SeedRun, TaskContext,
};
pub use config::{parse_config_text, ExperimentConfig};
pub use table::{ResultTable, Row};
