//! Experiment configuration files.
//!
//! A config is TOML with the sections `[model]`, `[corpus]`, `[pretrain]`,
//! `[train]` (with `[train.optimizer]` and `[train.seeds]`), `[spectrum]` and
//! `[sweep]`. Only `[model]` and `[train]` are required, and inside `[train]`
//! only `steps` and `eta`. Unknown keys are rejected. A JSON rendering of the
//! same structure (as written to `config.json` by every command) is accepted
//! wherever a TOML file is.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use winq_core::autodiff::Graph;
use winq_core::data::{generate_corpus, Batch, BatchSampler, SyntheticCorpus};
use winq_core::landscape::{GridMode, DEFAULT_SWEEP_ALPHAS};
use winq_core::model::{build_model, ModelConfig};
use winq_core::spectrum::{SlqConfig, DEFAULT_TAU};
use winq_core::tensor::{ParamKind, ParamVector};
use winq_core::train::TrainConfig;

use crate::error::{CliError, Result};

fn default_corpus_length() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_corpus_length")]
    pub length: usize,
    /// Also write the token stream as `corpus.toks`.
    #[serde(default)]
    pub dump_tokens: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seed: 0, length: default_corpus_length(), dump_tokens: false }
    }
}

fn default_pretrain_steps() -> usize {
    2000
}

/// Full-precision warm start before quantization-aware training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    /// Defaults to the training rate.
    #[serde(default)]
    pub eta: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: default_pretrain_steps(), eta: None }
    }
}

fn default_probes() -> usize {
    50
}

fn default_lanczos_steps() -> usize {
    40
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_lanczos_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Sequences in the fixed Hessian batch; defaults to the training batch.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Sampler seed for the Hessian batch.
    #[serde(default)]
    pub data_seed: u64,
    /// Include learnable quantizer steps in the Hessian.
    #[serde(default = "yes")]
    pub include_steps: bool,
    #[serde(default = "yes")]
    pub include_embeddings: bool,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            probes: default_probes(),
            steps: default_lanczos_steps(),
            seed: 0,
            tau: default_tau(),
            batch: None,
            data_seed: 0,
            include_steps: true,
            include_embeddings: true,
        }
    }
}

impl SpectrumConfig {
    pub fn slq(&self) -> SlqConfig {
        SlqConfig { probes: self.probes, steps: self.steps, seed: self.seed }
    }
}

fn default_alphas() -> Vec<f64> {
    DEFAULT_SWEEP_ALPHAS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub mode: GridMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { alphas: default_alphas(), mode: GridMode::Frozen }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a `.json` or TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed = if path.extension().is_some_and(|x| x == "json") { Self::from_json_str(&text) } else { Self::from_toml_str(&text) };
        parsed.map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.context > self.model.context {
            return Err(CliError::Config(format!(
                "train.context {} exceeds model.context {}",
                self.train.context, self.model.context
            )));
        }
        if self.corpus.length < 2 * (self.train.context + 1) {
            return Err(CliError::Config(format!("corpus.length {} too short for context {}", self.corpus.length, self.train.context)));
        }
        if let Some(eta) = self.pretrain.eta {
            if !(eta > 0.0) {
                return Err(CliError::Config(format!("pretrain.eta {eta} must be positive")));
            }
        }
        if !(self.spectrum.tau > 0.0) {
            return Err(CliError::Config(format!("spectrum.tau {} must be positive", self.spectrum.tau)));
        }
        Ok(())
    }

    /// Replace every seed (init, data, noise, corpus, spectrum) with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.train.seeds.init = seed;
        self.train.seeds.data = seed;
        self.train.seeds.noise = seed;
        self.corpus.seed = seed;
        self.spectrum.seed = seed;
        self.spectrum.data_seed = seed;
    }

    /// Canonical JSON echo; also the input to [`Self::digest`].
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn corpus(&self) -> Result<SyntheticCorpus> {
        Ok(generate_corpus(self.corpus.seed, self.model.vocab, self.corpus.length)?)
    }

    /// Graph and freshly initialized parameters.
    pub fn model(&self) -> Result<(Graph, ParamVector)> {
        Ok(build_model(&self.model, self.train.seeds.init)?)
    }

    /// Fixed batch the Hessian is evaluated on.
    pub fn hessian_batch(&self, corpus: &SyntheticCorpus) -> Result<Batch> {
        let batch = self.spectrum.batch.unwrap_or(self.train.batch);
        let mut s = BatchSampler::new(corpus, corpus.train_region(), batch, self.train.context, self.spectrum.data_seed)?;
        Ok(s.next_batch(corpus))
    }

    /// Coordinates the Hessian is restricted to.
    pub fn hessian_mask(&self, params: &ParamVector) -> Option<Vec<bool>> {
        if self.spectrum.include_steps && self.spectrum.include_embeddings {
            return None;
        }
        Some(params.layout().coordinate_mask(|e| {
            !(e.kind == ParamKind::Step && !self.spectrum.include_steps || e.kind == ParamKind::Embedding && !self.spectrum.include_embeddings)
        }))
    }
}
