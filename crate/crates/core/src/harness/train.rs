use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::numerics::{Element, Tape};
use crate::objective::{
    augment_stream, mask_disrupted, streaming_loss_on_tape, AugmentationConfig, LossBreakdown, Normalization,
    TrainingLog,
};
use crate::router::keep_count;
use crate::sequence::{interleave, StreamSample};

/// Momentum-free RMS-normalised steps at a fixed learning rate, after
/// clipping the global gradient norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.99,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub sigma: f64,
    pub normalization: Normalization,
    pub optimizer: OptimizerConfig,
    /// Applied per sample when `replace_prob > 0`; the seed is mixed with
    /// the step and batch slot.
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 1,
            sigma: 1.0,
            normalization: Normalization::PerTerm,
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Batch-mean loss per step.
    pub losses: Vec<LossBreakdown>,
    pub decisions_checked: usize,
    /// Frames whose kept count differed from `⌈r·V⌉`.
    pub keep_count_violations: usize,
}

struct RmsProp<T> {
    sq: Vec<Vec<T>>,
}

impl<T: Element> RmsProp<T> {
    fn new(model: &Model<T>) -> Self {
        Self {
            sq: model.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    fn step(&mut self, model: &mut Model<T>, cfg: &OptimizerConfig, grad_scale: f64) -> Result<()> {
        let params = model.params_mut();
        let norm = params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64_lossy() * grad_scale;
                g * g
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let clip = if cfg.clip > 0.0 && norm > cfg.clip {
            cfg.clip / norm
        } else {
            1.0
        };
        let scale = T::from_f64_lossy(grad_scale * clip);
        let (decay, lr, eps) = (
            T::from_f64_lossy(cfg.decay),
            T::from_f64_lossy(cfg.lr),
            T::from_f64_lossy(cfg.eps),
        );
        let one = T::one();
        for (p, sq) in params.iter_mut().zip(&mut self.sq) {
            let grad = p.grad.data().to_vec();
            for ((w, g), s) in p.value.data_mut().iter_mut().zip(grad).zip(sq.iter_mut()) {
                let g = g * scale;
                *s = decay * *s + (one - decay) * g * g;
                *w = *w - lr * g / (s.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

fn step_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// Trains on `data`, visiting samples in order and wrapping around.
pub fn train<T: Element>(
    model: &mut Model<T>,
    data: &[StreamSample],
    cfg: &TrainConfig,
    mut log: Option<&mut TrainingLog>,
) -> Result<TrainReport> {
    if cfg.steps > 0 && (data.is_empty() || cfg.batch == 0) {
        return Err(Error::Config("training needs data and a positive batch".into()));
    }
    let mut opt = RmsProp::new(model);
    let mut report = TrainReport::default();
    let frame_tokens = model.config().frame_tokens;
    let ratios: Vec<Option<f64>> = model
        .schedule()
        .kinds
        .iter()
        .map(|k| match k {
            LayerKind::MoD { ratio } if *ratio > 0.0 => Some(*ratio),
            _ => None,
        })
        .collect();
    for step in 0..cfg.steps {
        let mut mean = LossBreakdown::default();
        for slot in 0..cfg.batch {
            let sample = &data[(step * cfg.batch + slot) % data.len()];
            let seq = if cfg.augmentation.replace_prob > 0.0 {
                let aug = AugmentationConfig {
                    seed: step_seed(cfg.augmentation.seed, step, slot),
                    ..cfg.augmentation
                };
                let (s, markers) = augment_stream(sample, &aug)?;
                mask_disrupted(&interleave(&s, frame_tokens)?, &markers)?
            } else {
                interleave(sample, frame_tokens)?
            };
            let (vars, grads, loss, decisions) = {
                let mut tape = Tape::new();
                let vars = model.params().bind(&mut tape);
                let pass = model.forward_sequence_on_tape(&mut tape, &vars, &seq).and_then(|out| {
                    let (total, lb) =
                        streaming_loss_on_tape(&mut tape, out.logits, &seq, cfg.sigma, cfg.normalization)?;
                    Ok((total, lb, out.decisions))
                });
                let (total, lb, decisions) = pass.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { step },
                    other => other,
                })?;
                (vars, tape.backward(total)?, lb, decisions)
            };
            for d in &decisions {
                report.decisions_checked += 1;
                let expected = ratios[d.layer].map_or(0, |r| keep_count(r, frame_tokens));
                if d.kept.len() != expected {
                    report.keep_count_violations += 1;
                }
            }
            model.params_mut().accumulate(&vars, &grads)?;
            let b = cfg.batch as f64;
            mean.lm_loss += loss.lm_loss / b;
            mean.eos_loss += loss.eos_loss / b;
            mean.total += loss.total / b;
            mean.lm_count += loss.lm_count;
            mean.eos_count += loss.eos_count;
        }
        if !mean.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(model, &cfg.optimizer, 1.0 / cfg.batch as f64)
            .map_err(|_| Error::Diverged { step })?;
        if let Some(log) = log.as_deref_mut() {
            log.row(step, &mean, cfg.optimizer.lr)?;
        }
        report.losses.push(mean);
    }
    if let Some(log) = log {
        log.flush()?;
    }
    Ok(report)
}
