//! Experiment driver: TOML configuration, subcommands and deterministic
//! output files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{execute, Check, Command, Outcome};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use output::Manifest;

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<std::path::PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.run.master_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
    }
}

/// Loads `path` (or the defaults), applies `overrides` and executes `cmd`.
pub fn run_command(cmd: Command, path: Option<&std::path::Path>, overrides: &Overrides) -> Result<Outcome, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    execute(cmd, &cfg)
}
