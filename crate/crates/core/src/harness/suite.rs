//! Baseline comparison: every configuration trains from the same seed on the
//! same data and is scored on the same evaluation streams.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::eval::{eval_streaming, eval_teacher_forced, ModelResponder, StreamEvalConfig};
use super::task::{generate_dataset, GroundTruth, SyntheticTaskConfig};
use super::train::{train, TrainConfig, TrainReport};
use crate::costmodel::{cache_report, decoder_flops, CostConfig};
use crate::error::Result;
use crate::model::{build_layer_schedule, Insertion, KeepStrategy, Model, ModelConfig, DEFAULT_EARLY_EXIT};
use crate::sequence::{interleave, StreamEvent, StreamSample};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub model: ModelConfig,
}

/// Full computation, MoD-interleaved, early exit, layer skip, and the random
/// and uniform keep ablations of MoD-interleaved.
pub fn baseline_entries(base: &ModelConfig) -> Vec<SuiteEntry> {
    let with = |name: &str, insertion: Insertion, keep_strategy: KeepStrategy| SuiteEntry {
        name: name.to_string(),
        model: ModelConfig {
            insertion,
            keep_strategy,
            ..base.clone()
        },
    };
    vec![
        with("full", Insertion::FullComputation, KeepStrategy::Learnable),
        with("mod-interleaved", Insertion::Interleaved, KeepStrategy::Learnable),
        with(
            "early-exit",
            Insertion::EarlyExit(DEFAULT_EARLY_EXIT),
            KeepStrategy::Learnable,
        ),
        with("layer-skip", Insertion::LayerSkip, KeepStrategy::Learnable),
        with("random-keep", Insertion::Interleaved, KeepStrategy::Random),
        with("uniform-keep", Insertion::Interleaved, KeepStrategy::Uniform),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Task for training streams; evaluation uses `eval_task`.
    pub train_task: SyntheticTaskConfig,
    pub eval_task: SyntheticTaskConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub train: TrainConfig,
    pub eval: StreamEvalConfig,
    /// Parameter initialisation seed shared by every entry.
    pub init_seed: u64,
}

/// Training streams use indices from 0, evaluation streams from this offset.
pub const EVAL_STREAM_OFFSET: u64 = 1 << 32;

pub struct SuiteData {
    pub train: Vec<StreamSample>,
    pub eval: Vec<(StreamSample, GroundTruth)>,
}

impl SuiteData {
    pub fn generate(cfg: &SuiteConfig) -> Result<Self> {
        Ok(Self {
            train: generate_dataset(&cfg.train_task, 0, cfg.train_samples)?
                .into_iter()
                .map(|(s, _)| s)
                .collect(),
            eval: generate_dataset(&cfg.eval_task, EVAL_STREAM_OFFSET, cfg.eval_samples)?,
        })
    }

    /// Hex SHA-256 of the JSON encoding of every stream and its ground truth.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.train {
            h.update(serde_json::to_vec(s).expect("samples serialise"));
        }
        for (s, t) in &self.eval {
            h.update(serde_json::to_vec(s).expect("samples serialise"));
            h.update(serde_json::to_vec(t).expect("truth serialises"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub config: String,
    pub lm_ppl: Option<f64>,
    pub lm_correctness: Option<f64>,
    pub time_diff: Option<f64>,
    pub fluency: Option<f64>,
    pub router_precision: Option<f64>,
    pub flops_ratio: Option<f64>,
    pub cache_multiplier: Option<f64>,
    /// Set when the entry failed; the metrics before the failure are kept.
    pub error: Option<String>,
    #[serde(skip)]
    pub train_report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub data_hash: String,
    pub rows: Vec<SuiteRow>,
}

/// Desk-scale cost of `model` on an evaluation stream with `n_t` text tokens
/// over `frames` frames: FLOPs ratio against full computation, and how many
/// more frames fit the cache budget of the full model at `frames` frames.
pub fn desk_costs(model: &ModelConfig, frames: usize, n_t: usize) -> Result<(f64, f64)> {
    let cost = CostConfig {
        schedule: model.schedule(),
        ..CostConfig::new(
            model.layers,
            model.hidden,
            model.ffn,
            n_t,
            frames * model.frame_tokens,
            model.frame_tokens,
            Insertion::FullComputation,
            1.0,
            4,
        )
    };
    let flops = decoder_flops(&cost)?;
    let full_cfg = cost.with_schedule(build_layer_schedule(model.layers, Insertion::FullComputation, 1.0));
    let full_bytes = cache_report(&full_cfg, frames, u64::MAX)?.total_bytes.ceil() as u64;
    let cache = cache_report(&cost, frames, full_bytes)?;
    Ok((flops.ratio_vs_full, cache.context_multiplier))
}

fn run_entry(entry: &SuiteEntry, cfg: &SuiteConfig, data: &SuiteData, row: &mut SuiteRow) -> Result<()> {
    let frames = cfg.eval_task.duration;
    let n_t = data
        .eval
        .iter()
        .map(|(s, _)| {
            s.events
                .iter()
                .map(|e| match e {
                    StreamEvent::Text { tokens, .. } => tokens.len(),
                    StreamEvent::Frame { .. } => 0,
                })
                .sum::<usize>()
        })
        .sum::<usize>()
        / data.eval.len().max(1);
    let (flops, cache) = desk_costs(&entry.model, frames, n_t)?;
    row.flops_ratio = Some(flops);
    row.cache_multiplier = Some(cache);

    let mut model = Model::<f32>::new(entry.model.clone(), cfg.init_seed)?;
    row.train_report = train(&mut model, &data.train, &cfg.train, None)?;

    let seqs = data
        .eval
        .iter()
        .map(|(s, _)| interleave(s, entry.model.frame_tokens))
        .collect::<Result<Vec<_>>>()?;
    let tf = eval_teacher_forced(&model, &seqs)?;
    row.lm_ppl = tf.lm_ppl;
    row.lm_correctness = tf.lm_correctness;

    let sm = eval_streaming(&mut ModelResponder::new(&model), &data.eval, &cfg.eval)?;
    row.time_diff = Some(sm.time_diff);
    row.fluency = Some(sm.fluency);
    row.router_precision = sm.router_precision;
    Ok(())
}

/// Runs every entry in order. A failing entry records its error and the
/// suite continues.
pub fn run_suite(entries: &[SuiteEntry], cfg: &SuiteConfig) -> Result<SuiteReport> {
    let data = SuiteData::generate(cfg)?;
    run_suite_on(entries, cfg, &data)
}

pub fn run_suite_on(entries: &[SuiteEntry], cfg: &SuiteConfig, data: &SuiteData) -> Result<SuiteReport> {
    let rows = entries
        .iter()
        .map(|entry| {
            let mut row = SuiteRow {
                config: entry.name.clone(),
                lm_ppl: None,
                lm_correctness: None,
                time_diff: None,
                fluency: None,
                router_precision: None,
                flops_ratio: None,
                cache_multiplier: None,
                error: None,
                train_report: TrainReport::default(),
            };
            if let Err(e) = run_entry(entry, cfg, data, &mut row) {
                row.error = Some(e.to_string());
            }
            row
        })
        .collect();
    Ok(SuiteReport {
        data_hash: data.hash(),
        rows,
    })
}

pub const SUITE_CSV_HEADER: &str =
    "config,lm_ppl,lm_correctness,time_diff,fluency,router_precision,flops_ratio,cache_multiplier,error";

/// One row per entry; missing values are empty cells.
pub fn suite_csv(report: &SuiteReport) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut out = String::from(SUITE_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.config,
            cell(r.lm_ppl),
            cell(r.lm_correctness),
            cell(r.time_diff),
            cell(r.fluency),
            cell(r.router_precision),
            cell(r.flops_ratio),
            cell(r.cache_multiplier),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    out
}
