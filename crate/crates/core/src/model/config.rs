use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::{GateActivation, ScaleMode};

/// Which layers carry a router, or which baseline reduction to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Insertion {
    All,
    AllDeep,
    Interleaved,
    InterleavedDeep,
    FullComputation,
    /// Vision tokens are processed only in layers below the given index.
    EarlyExit(usize),
    /// Vision tokens skip every other layer entirely.
    LayerSkip,
}

pub const DEFAULT_EARLY_EXIT: usize = 2;

impl fmt::Display for Insertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Insertion::All => f.write_str("all"),
            Insertion::AllDeep => f.write_str("all-deep"),
            Insertion::Interleaved => f.write_str("interleaved"),
            Insertion::InterleavedDeep => f.write_str("interleaved-deep"),
            Insertion::FullComputation => f.write_str("full"),
            Insertion::EarlyExit(e) => write!(f, "early-exit:{e}"),
            Insertion::LayerSkip => f.write_str("layer-skip"),
        }
    }
}

impl FromStr for Insertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match s.as_str() {
            "all" => Insertion::All,
            "all-deep" => Insertion::AllDeep,
            "interleaved" => Insertion::Interleaved,
            "interleaved-deep" => Insertion::InterleavedDeep,
            "full" | "full-computation" => Insertion::FullComputation,
            "early-exit" => Insertion::EarlyExit(DEFAULT_EARLY_EXIT),
            "layer-skip" => Insertion::LayerSkip,
            other => match other.strip_prefix("early-exit:") {
                Some(e) => Insertion::EarlyExit(
                    e.parse()
                        .map_err(|_| Error::Config(format!("bad early-exit layer {e:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown insertion strategy {other:?}"))),
            },
        })
    }
}

impl TryFrom<String> for Insertion {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Insertion> for String {
    fn from(i: Insertion) -> String {
        i.to_string()
    }
}

/// How routed layers choose which vision tokens to process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeepStrategy {
    #[default]
    Learnable,
    /// Seeded random scores per frame and layer.
    Random,
    /// Evenly spaced offsets within the frame.
    Uniform,
}

impl FromStr for KeepStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "learnable" => Ok(KeepStrategy::Learnable),
            "random" => Ok(KeepStrategy::Random),
            "uniform" => Ok(KeepStrategy::Uniform),
            other => Err(Error::Config(format!("unknown keep strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    /// Every token is processed.
    Vanilla,
    /// Text plus the top `⌈ratio·V⌉` vision tokens of each frame. A ratio of
    /// zero processes text only.
    MoD { ratio: f64 },
    /// Text only.
    VisionSkipAll,
}

impl LayerKind {
    /// Fraction of vision tokens processed, as used by the cost model.
    pub fn effective_ratio(self) -> f64 {
        match self {
            LayerKind::Vanilla => 1.0,
            LayerKind::MoD { ratio } => ratio,
            LayerKind::VisionSkipAll => 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Vanilla => "vanilla",
            LayerKind::MoD { .. } => "mod",
            LayerKind::VisionSkipAll => "skip",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Vanilla => f.write_str("V"),
            LayerKind::MoD { ratio } => write!(f, "M({ratio})"),
            LayerKind::VisionSkipAll => f.write_str("S"),
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "V" => Ok(LayerKind::Vanilla),
            "S" => Ok(LayerKind::VisionSkipAll),
            _ => {
                let inner = s
                    .strip_prefix("M(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("bad layer kind {s:?}")))?;
                let ratio: f64 = inner
                    .parse()
                    .map_err(|_| Error::Config(format!("bad keep ratio in {s:?}")))?;
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::Config(format!("keep ratio {ratio} outside [0, 1]")));
                }
                Ok(LayerKind::MoD { ratio })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchedule {
    pub kinds: Vec<LayerKind>,
}

impl LayerSchedule {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn routed_layers(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, LayerKind::MoD { .. })).count()
    }
}

impl fmt::Display for LayerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.kinds.iter().map(|k| k.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LayerSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let kinds = s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        Ok(LayerSchedule { kinds })
    }
}

/// Layers exempt from routing under the `-Deep` strategies.
pub const SHALLOW_LAYERS: usize = 2;

pub fn build_layer_schedule(layers: usize, insertion: Insertion, keep_ratio: f64) -> LayerSchedule {
    let routed = LayerKind::MoD { ratio: keep_ratio };
    let kinds = (0..layers)
        .map(|l| match insertion {
            Insertion::FullComputation => LayerKind::Vanilla,
            Insertion::All => routed,
            Insertion::Interleaved if l % 2 == 1 => routed,
            Insertion::Interleaved => LayerKind::Vanilla,
            Insertion::AllDeep if l >= SHALLOW_LAYERS => routed,
            Insertion::AllDeep => LayerKind::Vanilla,
            Insertion::InterleavedDeep if l >= SHALLOW_LAYERS && l % 2 == 1 => routed,
            Insertion::InterleavedDeep => LayerKind::Vanilla,
            Insertion::EarlyExit(e) if l < e => LayerKind::Vanilla,
            Insertion::EarlyExit(_) => LayerKind::VisionSkipAll,
            Insertion::LayerSkip if l % 2 == 1 => LayerKind::VisionSkipAll,
            Insertion::LayerSkip => LayerKind::Vanilla,
        })
        .collect();
    LayerSchedule { kinds }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    /// Tokens per frame, `1 + h·w`.
    pub frame_tokens: usize,
    pub insertion: Insertion,
    pub keep_ratio: f64,
    pub keep_strategy: KeepStrategy,
    pub gate: GateActivation,
    pub scale_mode: ScaleMode,
    pub max_positions: usize,
    /// Seed for the random keep strategy.
    pub routing_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab: 130,
            frame_tokens: 10,
            insertion: Insertion::Interleaved,
            keep_ratio: 0.2,
            keep_strategy: KeepStrategy::Learnable,
            gate: GateActivation::Identity,
            scale_mode: ScaleMode::Gated,
            max_positions: 1024,
            routing_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 || self.vocab == 0 {
            return err("layers, hidden, ffn and vocab must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return err(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return err(format!("keep ratio {} outside (0, 1]", self.keep_ratio));
        }
        if self.frame_tokens == 0 {
            return err("frame_tokens must be positive".into());
        }
        if self.max_positions == 0 {
            return err("max_positions must be positive".into());
        }
        if let Insertion::EarlyExit(e) = self.insertion {
            if e >= self.layers {
                return err(format!(
                    "early exit layer {e} must be below layer count {}",
                    self.layers
                ));
            }
        }
        if crate::NUM_SPECIAL_TOKENS > self.vocab {
            return err("vocabulary too small for reserved ids".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LayerSchedule {
        build_layer_schedule(self.layers, self.insertion, self.keep_ratio)
    }
}
