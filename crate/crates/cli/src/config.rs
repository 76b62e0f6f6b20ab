//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use calm_core::eval::EvalConfig;
use calm_core::synth::SynthConfig;
use calm_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Where the initial embeddings (or encoder input features) come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthConfig),
    /// Embedding file, binary or CSV.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Output directory of an earlier run to continue from.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

impl RunConfigFile {
    /// Uses `seed` for data generation, batching and negative sampling.
    pub fn override_seed(&mut self, seed: u64) {
        if let DataSource::Synth(s) = &mut self.data {
            s.seed = seed;
        }
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

/// Parses a JSON file, rejecting unknown keys. Parse failures carry the line
/// and column of the offending token.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::ConfigParse {
        path: path.to_path_buf(),
        message: e.to_string(),
        line: Some(e.line()),
        column: Some(e.column()),
    })
}
