//! Flat run configuration.
//!
//! Every key has a default, so an empty file is a valid config. Keys are
//! listed in `RunConfig`; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{OptimizerConfig, StreamEvalConfig, SuiteConfig, SyntheticTaskConfig, TrainConfig};
use crate::model::{GateActivation, Insertion, KeepStrategy, ModelConfig, ScaleMode};
use crate::objective::{AugmentationConfig, Normalization};

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "VIDMOD_OUT";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub insertion: Insertion,
    pub keep_ratio: f64,
    pub keep_strategy: KeepStrategy,
    pub gate: GateActivation,
    pub scale_mode: ScaleMode,
    pub max_positions: usize,

    pub patch_vocab: usize,
    pub text_vocab: usize,
    pub frame_tokens: usize,
    pub signal_positions: usize,
    pub num_events: usize,
    pub event_prob: f64,
    pub response_len: usize,
    pub duration: usize,
    pub train_samples: usize,
    pub eval_samples: usize,

    pub shift_window: usize,
    pub replace_prob: f64,

    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub rms_decay: f64,
    pub clip: f64,
    pub sigma: f64,
    pub normalization: Normalization,

    pub window: usize,
    pub max_response: usize,

    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = SyntheticTaskConfig::default();
        let o = OptimizerConfig::default();
        Self {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn: m.ffn,
            insertion: m.insertion,
            keep_ratio: m.keep_ratio,
            keep_strategy: m.keep_strategy,
            gate: m.gate,
            scale_mode: m.scale_mode,
            max_positions: m.max_positions,
            patch_vocab: t.patch_vocab,
            text_vocab: t.text_vocab,
            frame_tokens: t.frame_tokens,
            signal_positions: t.signal_positions,
            num_events: t.num_events,
            event_prob: t.event_prob,
            response_len: t.response_len,
            duration: t.duration,
            train_samples: 5000,
            eval_samples: 64,
            shift_window: 2,
            replace_prob: 0.0,
            steps: 5000,
            batch: 1,
            lr: o.lr,
            rms_decay: o.decay,
            clip: o.clip,
            sigma: 1.0,
            normalization: Normalization::PerTerm,
            window: 2,
            max_response: t.response_len + 1,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Applies `key=value`; the value is read as a TOML literal, falling back
    /// to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.to_string(), value);
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        *self = Self::from_toml(&text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.task_config().validate()?;
        self.augmentation().validate()?;
        if self.batch == 0 || self.lr <= 0.0 || !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Config("batch, lr and rms_decay out of range".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            vocab: self.task_config().vocab(),
            frame_tokens: self.frame_tokens,
            insertion: self.insertion,
            keep_ratio: self.keep_ratio,
            keep_strategy: self.keep_strategy,
            gate: self.gate,
            scale_mode: self.scale_mode,
            max_positions: self.max_positions,
            routing_seed: self.seed,
        }
    }

    pub fn task_config(&self) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            patch_vocab: self.patch_vocab,
            text_vocab: self.text_vocab,
            frame_tokens: self.frame_tokens,
            signal_positions: self.signal_positions,
            num_events: self.num_events,
            event_prob: self.event_prob,
            response_len: self.response_len,
            duration: self.duration,
            seed: self.seed,
        }
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            shift_window: self.shift_window,
            replace_prob: self.replace_prob,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            sigma: self.sigma,
            normalization: self.normalization,
            optimizer: OptimizerConfig {
                lr: self.lr,
                decay: self.rms_decay,
                clip: self.clip,
                ..Default::default()
            },
            augmentation: self.augmentation(),
        }
    }

    pub fn stream_eval_config(&self) -> StreamEvalConfig {
        StreamEvalConfig {
            window: self.window,
            max_response: self.max_response,
            frame_tokens: self.frame_tokens,
        }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            train_task: self.task_config(),
            eval_task: self.task_config(),
            train_samples: self.train_samples,
            eval_samples: self.eval_samples,
            train: self.train_config(),
            eval: self.stream_eval_config(),
            init_seed: self.seed,
        }
    }

    /// Hex SHA-256 prefix over every key except `seed` and `out_dir`.
    pub fn config_hash(&self) -> String {
        let canonical = Self {
            seed: 0,
            out_dir: None,
            ..self.clone()
        }
        .to_toml();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Output root: `explicit`, else the environment variable, else the
    /// config's `out_dir`, else `runs`.
    pub fn output_root(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// `<root>/<hash>-s<seed>`
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-s{}", self.config_hash(), self.seed))
    }
}
