//! Experiment configuration: a run is fully specified by one JSON file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::CorruptionSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Learning rate.
    pub rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Mandatory: drives initialization, data generation, and batching.
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    8
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// What loss each training sequence contributes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Next-token prediction over the whole sequence.
    CausalLm,
    /// Next-token prediction with the first half treated as context.
    PrefixLm,
    /// Denoising per the corruption settings.
    Denoise { spec: CorruptionSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Fixed random corpus; the model memorizes it.
    Memorize { sequences: usize, length: usize },
    /// "start SEQ sep" → SEQ, scored by exact match.
    Copy { length: usize, vocab: usize, count: usize },
    /// A marked token hidden in filler; the query asks for it.
    Passkey { context_len: usize, count: usize },
    /// Responses scored by a designated-token counting oracle.
    PrefOracle { target: usize, response_len: usize, count: usize },
}

/// Alignment-stage hyperparameters; defaults suit the synthetic oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Preference-logit scale for direct preference training.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Advantage discount.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Sampling temperature for on-policy rollouts.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Distinct prompts in the synthetic preference task.
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    /// Held-out pair/prompt count for evaluation metrics.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
}

fn default_beta() -> f64 {
    0.5
}

fn default_gamma() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    1.0
}

fn default_prompts() -> usize {
    8
}

fn default_holdout() -> usize {
    64
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            beta: default_beta(),
            gamma: default_gamma(),
            temperature: default_temperature(),
            prompts: default_prompts(),
            holdout: default_holdout(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.prompts == 0 || self.holdout == 0 {
            return Err(Error::Config("prompts and holdout must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveKind,
    pub optim: OptimConfig,
    pub task: TaskKind,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.align.validate()?;
        if let ObjectiveKind::Denoise { spec } = &self.objective {
            spec.validate()?;
        }
        match self.task {
            TaskKind::Memorize { sequences, length } if sequences == 0 || length < 2 => {
                Err(Error::Config("memorize needs sequences >= 1 and length >= 2".into()))
            }
            TaskKind::Copy { length, vocab, count } if length == 0 || vocab == 0 || count == 0 => {
                Err(Error::Config("copy needs positive length, vocab, and count".into()))
            }
            TaskKind::Passkey { context_len, count } if context_len < 5 || count == 0 => {
                Err(Error::Config("passkey needs context_len >= 5 and count >= 1".into()))
            }
            TaskKind::PrefOracle { response_len, count, .. }
                if response_len == 0 || count == 0 =>
            {
                Err(Error::Config("preference task needs positive response length and count".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
