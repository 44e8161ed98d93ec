use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{AsrVariant, ModelConfig};
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Greedy-decode the evaluation set every this many steps (and at the end).
    pub eval_every: u64,
    pub eval_samples: usize,
    pub initial_w_asr: f64,
    pub initial_w_mt: f64,
    pub w_cl: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 4000,
            batch_size: 32,
            lr: 1.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            seed: 7,
            log_every: 1,
            checkpoint_every: 1000,
            eval_every: 500,
            eval_samples: 256,
            initial_w_asr: 1.0,
            initial_w_mt: 1.0,
            w_cl: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_asr: bool,
    pub use_mt: bool,
    pub use_shrink: bool,
    pub use_lbm: bool,
    pub use_l2g: bool,
    pub use_cl: bool,
    /// Fraction of training before shrinking switches on.
    pub shrink_warmup_fraction: f64,
    pub asr_variant: AsrVariant,
    /// Noise probability for the MT source.
    pub text_noise: f64,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_asr: true,
            use_mt: true,
            use_shrink: true,
            use_lbm: true,
            use_l2g: true,
            use_cl: true,
            shrink_warmup_fraction: 0.1,
            asr_variant: AsrVariant::Ctc,
            text_noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub scheduler: SchedulerConfig,
    pub training: TrainingConfig,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig {
            vocab_size: corpus.vocab_size,
            frame_dim: corpus.frame_dim,
            seed: corpus.seed,
            ..ModelConfig::default()
        };
        RunConfig {
            corpus,
            model,
            scheduler: SchedulerConfig::default(),
            training: TrainingConfig::default(),
            toggles: Toggles::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// One seed for data, initialization and training randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.vocab_size != self.corpus.vocab_size || self.model.frame_dim != self.corpus.frame_dim {
            return Err(Error::Config(format!(
                "model vocab/frame_dim ({}, {}) must match corpus ({}, {})",
                self.model.vocab_size, self.model.frame_dim, self.corpus.vocab_size, self.corpus.frame_dim
            )));
        }
        // noisy text is the longest textual-encoder input
        self.model.validate(2 * self.corpus.max_src_len - 1)?;
        self.scheduler.validate()?;
        let t = &self.training;
        if t.steps == 0 || t.batch_size == 0 || t.log_every == 0 || t.checkpoint_every == 0 || t.eval_every == 0 {
            return Err(Error::Config("steps, batch_size and cadences must be positive".into()));
        }
        if self.toggles.use_cl && t.batch_size < 2 {
            return Err(Error::Config("contrastive loss needs batch_size >= 2".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        for (name, f) in [
            ("warmup_fraction", t.warmup_fraction),
            ("shrink_warmup_fraction", self.toggles.shrink_warmup_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} {f} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.toggles.text_noise) {
            return Err(Error::Config(format!("text_noise {} outside [0, 1)", self.toggles.text_noise)));
        }
        if t.initial_w_asr < 0.0 || t.initial_w_mt < 0.0 || t.w_cl < 0.0 || t.clip_norm < 0.0 {
            return Err(Error::Config("weights and clip norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.training.steps as f64 * self.training.warmup_fraction).round() as u64).max(1)
    }

    /// First step (0-based) that trains on shrunk sequences.
    pub fn shrink_start(&self) -> u64 {
        (self.training.steps as f64 * self.toggles.shrink_warmup_fraction).round() as u64
    }

    pub fn shrink_active(&self, step: u64) -> bool {
        self.toggles.use_shrink && step >= self.shrink_start()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let err = RunConfig::from_json(r#"{"training": {"stepz": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let partial = RunConfig::from_json(r#"{"training": {"steps": 3}}"#).unwrap();
        assert_eq!(partial.training.steps, 3);
    }

    #[test]
    fn mismatched_vocab_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let cfg = RunConfig::default().with_seed(99);
        assert_eq!((cfg.corpus.seed, cfg.model.seed, cfg.training.seed), (99, 99, 99));
    }
}
