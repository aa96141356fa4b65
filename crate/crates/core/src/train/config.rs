//! Experiment configuration and its identity hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cot::SinkhornConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_generator: 1e-4,
            lr_critic: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lr_generator) && ok(self.lr_critic) && ok(self.weight_decay)) {
            return Err(Error::config("learning rates and weight decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("AdamW betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("AdamW epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization.
    pub init: u64,
    /// Batch order.
    pub shuffle: u64,
    /// Generator noise.
    pub noise: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Directory holding `manifest.json` and the records.
    pub dataset: PathBuf,
    /// Run directory for checkpoints and the metric log.
    pub output: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
    #[serde(default = "default_penalty_weight")]
    pub penalty_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub seeds: Seeds,
    /// Save a checkpoint every this many epochs (0: only the final one).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Hold every window in memory.
    #[serde(default = "default_preload")]
    pub preload: bool,
}

fn default_penalty_weight() -> f64 {
    1.0
}

fn default_preload() -> bool {
    true
}

impl TrainConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text, path)?;
        // relative paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Shape-independent checks; the model is checked against the data
    /// layout when training starts.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be >= 2 for the martingale penalty"));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::config("penalty weight must be finite and >= 0"));
        }
        self.sinkhorn.validate()?;
        self.optimizer.validate()
    }

    /// SHA-256 over everything that determines the training trajectory:
    /// model, transport, penalty, batch size, optimizer and seeds. Epoch
    /// count, paths and checkpoint cadence are excluded so a run can be
    /// extended or moved and still resume.
    pub fn hash(&self) -> String {
        let identity = serde_json::json!({
            "model": self.model,
            "sinkhorn": self.sinkhorn,
            "penalty_weight": self.penalty_weight,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "seeds": self.seeds,
        });
        let digest = Sha256::digest(identity.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
