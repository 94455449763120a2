//! JSON documents accepted by the command-line tool.
//!
//! ```
//! use clipbench::config::RunConfigFile;
//! let text = r#"{
//!   "env": {"vocab_size": 8, "horizon": 1, "num_prompts": 1,
//!           "verifier": {"kind": "target_sequence", "params": {"targets": [[3]]}}},
//!   "train": {"rule": {"kind": "kl3", "params": {"delta": 0.07}},
//!             "group_size": 8, "learning_rate": 0.1, "steps": 200}
//! }"#;
//! let cfg = RunConfigFile::from_json(text).unwrap();
//! assert_eq!(cfg.train.eval_every, 50);
//! assert!(RunConfigFile::from_json(&text.replace("\"steps\"", "\"stpes\"")).is_err());
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::policy::{EnvConfig, TokenEnv};
use crate::trainer::{SweepEntry, TrainConfig};

/// A single training run. Evaluation cadence, `K` and temperature live in
/// `train` (`eval_every`, `eval_k`, `eval_temperature`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub env: EnvConfig,
    pub train: TrainConfig,
    /// Used when no output directory is given on the command line.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfigFile {
    /// Parses and validates; the environment is built once to check its size.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.train.validate()?;
        TokenEnv::new(cfg.env.clone())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Several named configurations trained over a shared seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfigFile {
    pub env: EnvConfig,
    pub runs: Vec<SweepEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl SweepConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config(e.to_string()))?;
        if cfg.runs.is_empty() || cfg.seeds.is_empty() {
            return Err(config("a sweep needs at least one run and one seed"));
        }
        let mut names: Vec<&str> = cfg.runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config("run names must be unique"));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\']) || *n == "." || *n == "..") {
            return Err(config("run names must be plain directory names"));
        }
        for r in &cfg.runs {
            r.config.validate()?;
        }
        TokenEnv::new(cfg.env.clone())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
