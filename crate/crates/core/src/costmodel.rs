//! Analytic decoder FLOPs and key/value-cache footprint.
//!
//! A layer processing `n = n_t + r·n_v` tokens costs
//! `4·n·d² + 2·n²·d + 2·n·d·m` FLOPs. Router, projector and adapter costs are
//! not counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{build_layer_schedule, Insertion, LayerKind, LayerSchedule};
use crate::router::keep_count;

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    pub hidden: usize,
    pub ffn: usize,
    /// Language tokens in the whole stream.
    pub n_t: usize,
    /// Vision tokens in the whole stream.
    pub n_v: usize,
    /// Tokens per frame.
    pub frame_tokens: usize,
    pub schedule: LayerSchedule,
    /// Bytes per cached token per layer: keys and values, `2·d·dtype bytes`.
    pub bytes_per_entry: u64,
}

/// bf16 storage.
pub const REFERENCE_DTYPE_BYTES: u64 = 2;

impl CostConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layers: usize,
        hidden: usize,
        ffn: usize,
        n_t: usize,
        n_v: usize,
        frame_tokens: usize,
        insertion: Insertion,
        keep_ratio: f64,
        dtype_bytes: u64,
    ) -> Self {
        Self {
            hidden,
            ffn,
            n_t,
            n_v,
            frame_tokens,
            schedule: build_layer_schedule(layers, insertion, keep_ratio),
            bytes_per_entry: 2 * hidden as u64 * dtype_bytes,
        }
    }

    /// 32 layers, d = 4096, m = 14336, 600 frames of 10 tokens, 100 text
    /// tokens, bf16.
    pub fn reference_scale(insertion: Insertion, keep_ratio: f64) -> Self {
        Self::new(
            32,
            4096,
            14336,
            100,
            6000,
            10,
            insertion,
            keep_ratio,
            REFERENCE_DTYPE_BYTES,
        )
    }

    pub fn with_schedule(&self, schedule: LayerSchedule) -> Self {
        Self {
            schedule,
            ..self.clone()
        }
    }

    fn full(&self) -> Self {
        self.with_schedule(LayerSchedule {
            kinds: vec![LayerKind::Vanilla; self.schedule.len()],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.ffn == 0 || self.frame_tokens == 0 || self.bytes_per_entry == 0 {
            return Err(Error::Config("cost model sizes must be positive".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        if self.n_v == 0 || !self.n_v.is_multiple_of(self.frame_tokens) {
            return Err(Error::Config(format!(
                "n_v {} is not a positive multiple of {} tokens per frame",
                self.n_v, self.frame_tokens
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.n_v / self.frame_tokens
    }
}

pub fn layer_flops(n_t: f64, n_v: f64, r: f64, d: f64, m: f64) -> f64 {
    let n = n_t + r * n_v;
    4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: &'static str,
    pub effective_r: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total: f64,
    pub full_total: f64,
    pub ratio_vs_full: f64,
}

fn layer_totals(cfg: &CostConfig) -> Vec<LayerFlops> {
    cfg.schedule
        .kinds
        .iter()
        .enumerate()
        .map(|(layer, kind)| {
            let r = kind.effective_ratio();
            LayerFlops {
                layer,
                kind: kind.label(),
                effective_r: r,
                flops: layer_flops(cfg.n_t as f64, cfg.n_v as f64, r, cfg.hidden as f64, cfg.ffn as f64),
            }
        })
        .collect()
}

pub fn decoder_flops(cfg: &CostConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let layers = layer_totals(cfg);
    let total = layers.iter().map(|l| l.flops).sum();
    let full_total = layer_totals(&cfg.full()).iter().map(|l| l.flops).sum();
    Ok(FlopsReport {
        layers,
        total,
        full_total,
        ratio_vs_full: total / full_total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEntries {
    pub layer: usize,
    pub kind: &'static str,
    pub effective_r: f64,
    /// Vision entries per frame plus the amortised language entries.
    pub entries_per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheReport {
    pub layers: Vec<LayerEntries>,
    pub bytes_per_frame: f64,
    pub frames: usize,
    pub total_bytes: f64,
    pub budget: u64,
    pub max_frames: u64,
    pub max_frames_full: u64,
    pub context_multiplier: f64,
}

fn entries(cfg: &CostConfig) -> Vec<LayerEntries> {
    let text_per_frame = cfg.n_t as f64 / cfg.frames() as f64;
    cfg.schedule
        .kinds
        .iter()
        .enumerate()
        .map(|(layer, kind)| {
            let vision = match *kind {
                LayerKind::Vanilla => cfg.frame_tokens,
                LayerKind::MoD { ratio } => keep_count(ratio, cfg.frame_tokens),
                LayerKind::VisionSkipAll => 0,
            };
            LayerEntries {
                layer,
                kind: kind.label(),
                effective_r: kind.effective_ratio(),
                entries_per_frame: vision as f64 + text_per_frame,
            }
        })
        .collect()
}

fn bytes_per_frame(cfg: &CostConfig) -> f64 {
    entries(cfg).iter().map(|e| e.entries_per_frame).sum::<f64>() * cfg.bytes_per_entry as f64
}

/// Cache footprint after `frames` frames, and how many frames fit `budget`.
pub fn cache_report(cfg: &CostConfig, frames: usize, budget: u64) -> Result<CacheReport> {
    cfg.validate()?;
    let per_frame = bytes_per_frame(cfg);
    let per_frame_full = bytes_per_frame(&cfg.full());
    if (budget as f64) < per_frame_full {
        return Err(Error::BudgetTooSmall {
            budget,
            frame_bytes: per_frame_full.ceil() as u64,
        });
    }
    let max_frames = (budget as f64 / per_frame).floor() as u64;
    let max_frames_full = (budget as f64 / per_frame_full).floor() as u64;
    Ok(CacheReport {
        layers: entries(cfg),
        bytes_per_frame: per_frame,
        frames,
        total_bytes: per_frame * frames as f64,
        budget,
        max_frames,
        max_frames_full,
        context_multiplier: max_frames as f64 / max_frames_full as f64,
    })
}

/// `r, ratio_vs_full` for each keep ratio, with the insertion strategy fixed.
pub fn flops_sweep(cfg: &CostConfig, insertion: Insertion, ratios: &[f64]) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&r| {
            let c = cfg.with_schedule(build_layer_schedule(cfg.schedule.len(), insertion, r));
            Ok((r, decoder_flops(&c)?.ratio_vs_full))
        })
        .collect()
}

/// `r, context_multiplier` for each keep ratio.
pub fn cache_sweep(cfg: &CostConfig, insertion: Insertion, ratios: &[f64], budget: u64) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&r| {
            let c = cfg.with_schedule(build_layer_schedule(cfg.schedule.len(), insertion, r));
            Ok((r, cache_report(&c, c.frames(), budget)?.context_multiplier))
        })
        .collect()
}

pub fn flops_csv(report: &FlopsReport) -> String {
    let mut s = String::from("layer,kind,effective_r,flops\n");
    for l in &report.layers {
        let _ = writeln!(s, "{},{},{},{:.0}", l.layer, l.kind, l.effective_r, l.flops);
    }
    let _ = writeln!(s, "total,,{:.6},{:.0}", report.ratio_vs_full, report.total);
    s
}

pub fn cache_csv(report: &CacheReport) -> String {
    let mut s = String::from("layer,kind,effective_r,entries_per_frame\n");
    for l in &report.layers {
        let _ = writeln!(s, "{},{},{},{:.6}", l.layer, l.kind, l.effective_r, l.entries_per_frame);
    }
    let _ = writeln!(
        s,
        "total,max_frames={},max_frames_full={},{:.6}",
        report.max_frames, report.max_frames_full, report.context_multiplier
    );
    s
}

pub fn sweep_csv(column: &str, rows: &[(f64, f64)]) -> String {
    let mut s = format!("r,{column}\n");
    for (r, v) in rows {
        let _ = writeln!(s, "{r},{v:.6}");
    }
    s
}
