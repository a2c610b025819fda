//! Configuration files, the bundled generators and simulators, and the
//! `dynens` command line.
//!
//! A run goes config file -> [`load_config`] (parse and validate) ->
//! [`prepare`] (detect the platform, build the resource pool, executor and
//! user functions) -> [`execute`] (run the ensemble and write the history
//! dump and metrics).

mod cli;
mod config;
mod gens;
pub mod registry;
mod run;
mod sims;

use thiserror::Error;

pub use cli::{apply_overrides, cli_run, Cli, Command, CommsArg, RunArgs};
pub use config::{
    load_config, parse_config, AllocBlock, CommsSetting, ExitSettings, FunctionBlock,
    InventorySource, PlatformSettings, ResourceSettings, RunConfig, StopValSetting,
    SCHEMA_VERSION,
};
pub use gens::{gpu_count, persistent_uniform, persistent_with_gpu_counts, uniform_sample};
pub use run::{execute, metrics_summary, prepare, summarize, HistorySummary, Prepared, RunReport};
pub use sims::{read_final_energy, sim_norm, sim_stub_app, sim_synthetic, StubParams, STUB_APP};

#[derive(Debug, Error)]
pub enum AppError {
    /// A config value failed validation. `field` is a dotted path such as
    /// `gen.user.ub`.
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Resources(#[from] crate::resources::ResourceError),
    #[error(transparent)]
    Executor(#[from] crate::executor::ExecutorError),
    #[error(transparent)]
    Ensemble(#[from] crate::runtime::EnsembleError),
    #[error(transparent)]
    History(#[from] crate::history::HistoryError),
    #[error(transparent)]
    Generator(#[from] crate::gp_generator::GpGenError),
}

impl AppError {
    pub fn field(name: &str, message: impl Into<String>) -> Self {
        Self::Field {
            field: name.to_string(),
            message: message.into(),
        }
    }

    /// True for problems with the config itself rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Field { .. } | Self::Parse(_))
    }
}
