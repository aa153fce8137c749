//! Deterministic CSV tables, JSON summaries and run manifests.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Formats a float so that equal values always give equal text.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", self.header.join(","))?;
        for r in &self.rows {
            writeln!(out, "{}", r.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// The effective configuration as TOML.
    pub config: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let config = cfg.to_toml()?;
        Ok(Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: sha256_hex(config.as_bytes()),
            master_seed: cfg.run.master_seed,
            config,
        })
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
