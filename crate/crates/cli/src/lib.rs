//! Experiment pipeline behind the `starmt` command: config schema,
//! provenance records and the six stage commands.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod provenance;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use pipeline::{
    cmd_adapt, cmd_degrade, cmd_eval, cmd_gen_data, cmd_report, cmd_train_source, run_all, Options,
    Status,
};

/// The bundled desk-scale experiment.
pub const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");
