//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use motif_core::corpus::{MinHashConfig, MixtureSchedule};
use motif_core::model::ModelConfig;
use motif_core::training::{DpoConfig, OptimizerConfig, SmaConfig, TrainOptions, WsdSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub wsd: WsdSchedule,
    #[serde(default)]
    pub mixture: MixtureSchedule,
    #[serde(default)]
    pub sma: Option<SmaConfig>,
    #[serde(default)]
    pub seed: u64,
    pub training: TrainingSection,
    #[serde(default)]
    pub anneal: Option<AnnealSection>,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub dpo: Option<DpoSection>,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_tokens: usize,
    pub seq_len: usize,
    #[serde(default = "default_micro")]
    pub micro_batch_seqs: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub steps: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub mixture_horizon: Option<u64>,
}

fn default_micro() -> usize {
    16
}

fn default_clip() -> f64 {
    1.0
}

/// Long-context continuation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSection {
    #[serde(default = "default_long_theta")]
    pub rope_theta: f64,
    pub max_seq_len: usize,
    pub seq_len: usize,
    pub steps: u64,
    #[serde(default)]
    pub micro_batch_seqs: Option<usize>,
}

fn default_long_theta() -> f64 {
    500_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub minhash: MinHashConfig,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            min_tokens: 24,
            max_tokens: usize::MAX,
            minhash: MinHashConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSection {
    pub stages: Vec<DpoStageSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoStageSection {
    /// JSONL of `{"prompt": [...], "chosen": [...], "rejected": [...]}`.
    pub train: PathBuf,
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default)]
    pub config: DpoConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus JSONL; the bundled toy corpus when absent.
    pub corpus: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    pub out: Option<PathBuf>,
    /// Metrics CSV; `<out>/metrics.csv` when absent.
    pub metrics: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates `path`. Relative paths inside the file are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            msg,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Parses and validates a JSON document; errors name the offending field.
    pub fn parse(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            if at == "." {
                e.into_inner().to_string()
            } else {
                format!("at {at}: {}", e.into_inner())
            }
        })?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> motif_core::Result<()> {
        self.model.validate()?;
        self.train_options().validate()?;
        self.mixture.validate()?;
        self.preprocess.minhash.validate()?;
        if self.training.seq_len == 0 || self.training.seq_len > self.model.max_seq_len {
            return Err(config_error(
                "training.seq_len",
                format!("must lie in 1..={}", self.model.max_seq_len),
            ));
        }
        if !self.training.batch_tokens.is_multiple_of(self.training.seq_len) {
            return Err(config_error(
                "training.batch_tokens",
                "must be a multiple of training.seq_len",
            ));
        }
        if self.optimizer.warmup_steps != self.wsd.warmup_steps {
            return Err(config_error(
                "wsd.warmup_steps",
                format!("must equal optimizer.warmup_steps ({})", self.optimizer.warmup_steps),
            ));
        }
        if self.preprocess.min_tokens > self.preprocess.max_tokens {
            return Err(config_error("preprocess.min_tokens", "exceeds preprocess.max_tokens"));
        }
        if let Some(a) = &self.anneal {
            motif_core::attention::abf_rescale(&self.model, a.rope_theta, a.max_seq_len)?;
            if a.seq_len == 0 || a.seq_len > a.max_seq_len || !self.training.batch_tokens.is_multiple_of(a.seq_len) {
                return Err(config_error(
                    "anneal.seq_len",
                    "must lie in 1..=anneal.max_seq_len and divide training.batch_tokens",
                ));
            }
            if a.micro_batch_seqs == Some(0) {
                return Err(config_error("anneal.micro_batch_seqs", "must be positive"));
            }
        }
        if let Some(d) = &self.dpo {
            if d.stages.is_empty() {
                return Err(config_error("dpo.stages", "must list at least one stage"));
            }
            for s in &d.stages {
                s.config.validate()?;
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.paths.corpus, &mut self.paths.out, &mut self.paths.metrics]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(d) = &mut self.dpo {
            for s in &mut d.stages {
                fix(&mut s.train);
                if let Some(h) = &mut s.heldout {
                    fix(h);
                }
            }
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: self.optimizer,
            schedule: self.wsd,
            sma: self.sma,
            batch_tokens: self.training.batch_tokens,
            micro_batch_seqs: self.training.micro_batch_seqs,
            grad_clip: self.training.grad_clip,
            mixture_horizon: self.training.mixture_horizon,
        }
    }
}

fn config_error(field: &str, constraint: impl Into<String>) -> motif_core::Error {
    motif_core::Error::Config {
        field: field.into(),
        constraint: constraint.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"hidden_dim": 16, "n_layers": 1, "ffn_dim": 24, "n_heads": 2, "n_kv_heads": 2,
                  "vocab_size": 256, "max_seq_len": 32, "rope_theta": 10000.0},
        "optimizer": {"warmup_steps": 2},
        "wsd": {"warmup_steps": 2, "stable_end": 8, "total": 10},
        "training": {"batch_tokens": 64, "seq_len": 16, "steps": 10}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.optimizer.peak_lr, 5e-4);
        assert_eq!(c.wsd.floor_fraction, 0.25);
        assert_eq!(c.mixture, MixtureSchedule::pretraining());
        assert_eq!(c.training.micro_batch_seqs, 16);
        assert_eq!(c.preprocess.min_tokens, 24);
    }

    #[test]
    fn errors_carry_field_paths() {
        let bad = MINIMAL.replace("\"n_layers\": 1", "\"n_layers\": \"one\"");
        let msg = RunConfig::parse(&bad).unwrap_err();
        assert!(msg.contains("model.n_layers"), "{msg}");

        let unknown = MINIMAL.replace("\"steps\": 10", "\"steps\": 10, \"stpes\": 3");
        let msg = RunConfig::parse(&unknown).unwrap_err();
        assert!(msg.contains("training") && msg.contains("stpes"), "{msg}");
    }

    #[test]
    fn semantic_validation() {
        let bad = MINIMAL.replace("\"stable_end\": 8", "\"stable_end\": 12");
        assert!(RunConfig::parse(&bad).unwrap_err().contains("wsd"));
        let bad = MINIMAL.replace("\"seq_len\": 16", "\"seq_len\": 64");
        assert!(RunConfig::parse(&bad).unwrap_err().contains("training.seq_len"));
        let bad = MINIMAL.replace(
            "\"optimizer\": {\"warmup_steps\": 2}",
            "\"optimizer\": {\"warmup_steps\": 3}",
        );
        assert!(RunConfig::parse(&bad).unwrap_err().contains("warmup"));
    }
}
