use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use basm_core::harness::CHECKPOINT_VERSION;
use basm_core::{Error, Result};
use serde::Serialize;

use crate::config::FileConfig;

/// `manifest.json` of a run directory.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub checkpoint_format: u32,
    pub subcommand: &'static str,
    pub argv: Vec<String>,
    pub config_file: Option<PathBuf>,
    /// The configuration after flag overrides.
    pub config: FileConfig,
    pub seeds: BTreeMap<&'static str, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(subcommand: &'static str, config_file: Option<PathBuf>, config: FileConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: CHECKPOINT_VERSION,
            subcommand,
            argv: std::env::args().collect(),
            config_file,
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
