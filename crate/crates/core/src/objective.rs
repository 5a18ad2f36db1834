//! Language-modelling plus streaming-EOS objective, and temporal augmentation.
//!
//! Position `j` carries an LM term iff `lm[j + 1]` (target: token `j + 1`)
//! and an EOS term iff `stream[j]` (target: [`EOS_ID`]).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Element, Pick, Tape, Tensor, Var};
use crate::sequence::{InterleavedSequence, SpanKind, StreamEvent, StreamSample, TokenRole};
use crate::EOS_ID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Each term is averaged over its own contributing positions.
    #[default]
    PerTerm,
    /// Both sums are divided by the sequence length.
    SequenceLength,
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-term" => Ok(Normalization::PerTerm),
            "sequence-length" => Ok(Normalization::SequenceLength),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    pub eos_loss: f64,
    pub total: f64,
    pub lm_count: usize,
    pub eos_count: usize,
}

/// `(row, target)` of every LM term.
pub fn lm_terms(seq: &InterleavedSequence) -> Vec<(usize, usize)> {
    (0..seq.len().saturating_sub(1))
        .filter(|&j| seq.lm[j + 1])
        .map(|j| (j, seq.token_ids[j + 1]))
        .collect()
}

/// Rows carrying an EOS term.
pub fn eos_terms(seq: &InterleavedSequence) -> Vec<usize> {
    (0..seq.len()).filter(|&j| seq.stream[j]).collect()
}

fn divisor(norm: Normalization, count: usize, len: usize) -> f64 {
    match norm {
        Normalization::PerTerm => count as f64,
        Normalization::SequenceLength => len as f64,
    }
}

fn check_rows<T: Element>(logits: &Tensor<T>, seq: &InterleavedSequence) -> Result<()> {
    if logits.rows() != seq.len() {
        return Err(Error::shape(
            "streaming_loss",
            format!("{} logit rows for {} tokens", logits.rows(), seq.len()),
        ));
    }
    // EOS_ID is 0, so any non-empty vocabulary contains it.
    if logits.cols() == 0 {
        return Err(Error::shape("streaming_loss", "vocabulary lacks the EOS id"));
    }
    Ok(())
}

/// Loss from materialised logits, evaluated in f64.
pub fn streaming_loss<T: Element>(
    logits: &Tensor<T>,
    seq: &InterleavedSequence,
    sigma: f64,
    norm: Normalization,
) -> Result<LossBreakdown> {
    check_rows(logits, seq)?;
    let nll = |row: usize, target: usize| -> f64 {
        let r: Vec<f64> = logits.row_slice(row).iter().map(|v| v.to_f64_lossy()).collect();
        kernels::log_sum_exp(&r) - r[target]
    };
    let lm = lm_terms(seq);
    let eos = eos_terms(seq);
    let n = seq.len();
    let lm_sum: f64 = lm.iter().map(|&(j, t)| nll(j, t)).sum();
    let eos_sum: f64 = eos.iter().map(|&j| nll(j, EOS_ID)).sum();
    let lm_loss = if lm.is_empty() {
        0.0
    } else {
        lm_sum / divisor(norm, lm.len(), n)
    };
    let eos_loss = if eos.is_empty() {
        0.0
    } else {
        eos_sum / divisor(norm, eos.len(), n)
    };
    let total = lm_loss + sigma * eos_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "streaming_loss" });
    }
    Ok(LossBreakdown {
        lm_loss,
        eos_loss,
        total,
        lm_count: lm.len(),
        eos_count: eos.len(),
    })
}

/// Records the loss on `tape`; returns the `[1×1]` total and its breakdown.
pub fn streaming_loss_on_tape<T: Element>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    seq: &InterleavedSequence,
    sigma: f64,
    norm: Normalization,
) -> Result<(Var, LossBreakdown)> {
    check_rows(tape.value(logits), seq)?;
    let n = seq.len();
    let lm = lm_terms(seq);
    let eos = eos_terms(seq);
    let term = |tape: &mut Tape<'_, T>, picks: Vec<(usize, usize)>| -> Result<Option<Var>> {
        if picks.is_empty() {
            return Ok(None);
        }
        let w = T::from_f64_lossy(1.0 / divisor(norm, picks.len(), n));
        let picks = picks
            .into_iter()
            .map(|(row, target)| Pick { row, target, weight: w })
            .collect();
        tape.cross_entropy(logits, picks).map(Some)
    };
    let lm_var = term(tape, lm.clone())?;
    let eos_var = term(tape, eos.iter().map(|&j| (j, EOS_ID)).collect())?;
    let value = |tape: &Tape<'_, T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).get(0, 0).to_f64_lossy());
    let lm_loss = value(tape, lm_var);
    let eos_loss = value(tape, eos_var);
    let scaled_eos = match eos_var {
        Some(e) => Some(tape.scale(e, T::from_f64_lossy(sigma))?),
        None => None,
    };
    let total = match (lm_var, scaled_eos) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok((
        total,
        LossBreakdown {
            lm_loss,
            eos_loss,
            total: tape.value(total).get(0, 0).to_f64_lossy(),
            lm_count: lm.len(),
            eos_count: eos.len(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Maximum shift in frames.
    pub shift_window: usize,
    pub replace_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            shift_window: 2,
            replace_prob: 0.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::Config(format!(
                "replace_prob {} outside [0, 1]",
                self.replace_prob
            )));
        }
        Ok(())
    }
}

/// A response span whose timing or content no longer matches the video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DisruptedSpan {
    /// Text-event ordinal in the augmented sample.
    pub ordinal: usize,
    pub anchor: usize,
    pub original_anchor: usize,
    pub shifted: bool,
    pub swapped: bool,
}

struct TextEvent {
    order: usize,
    anchor: usize,
    original_anchor: usize,
    kind: SpanKind,
    tokens: Vec<usize>,
    original_tokens: Vec<usize>,
    shifted: bool,
}

/// Shifts and/or swaps response spans. Events are re-laid so every text
/// event follows its anchor frame, keeping the original text order within a
/// frame.
pub fn augment_stream(sample: &StreamSample, cfg: &AugmentationConfig) -> Result<(StreamSample, Vec<DisruptedSpan>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frame_ids = sample.frame_ids();
    let mut texts: Vec<TextEvent> = sample
        .events
        .iter()
        .filter_map(|e| match e {
            StreamEvent::Text { anchor, kind, tokens } => Some((*anchor, *kind, tokens.clone())),
            _ => None,
        })
        .enumerate()
        .map(|(order, (anchor, kind, tokens))| TextEvent {
            order,
            anchor,
            original_anchor: anchor,
            kind,
            original_tokens: tokens.clone(),
            tokens,
            shifted: false,
        })
        .collect();
    let responses: Vec<usize> = (0..texts.len())
        .filter(|&i| texts[i].kind == SpanKind::Response)
        .collect();

    for &i in &responses {
        if cfg.replace_prob <= 0.0 || !rng.random_bool(cfg.replace_prob) {
            continue;
        }
        // 0: shift, 1: swap, 2: both
        let mut branch = rng.random_range(0..3u8);
        if responses.len() < 2 {
            branch = 0;
        }
        if branch != 0 {
            let others: Vec<usize> = responses.iter().copied().filter(|&o| o != i).collect();
            let j = others[rng.random_range(0..others.len())];
            let (ti, tj) = (texts[i].tokens.clone(), texts[j].tokens.clone());
            texts[i].tokens = tj;
            texts[j].tokens = ti;
        }
        if branch != 1 {
            let w = cfg.shift_window as i64;
            let offset = rng.random_range(-w..=w);
            let idx = frame_ids
                .iter()
                .position(|&f| f == texts[i].anchor)
                .ok_or_else(|| Error::Sample(format!("anchor {} is not a frame", texts[i].anchor)))?;
            let moved = (idx as i64 + offset).clamp(0, frame_ids.len() as i64 - 1) as usize;
            if frame_ids[moved] != texts[i].anchor {
                texts[i].anchor = frame_ids[moved];
                texts[i].shifted = true;
            }
        }
    }

    let mut events = Vec::with_capacity(sample.events.len());
    let mut markers = Vec::new();
    let mut ordinal = 0;
    for e in &sample.events {
        let StreamEvent::Frame { frame_id, .. } = e else {
            continue;
        };
        events.push(e.clone());
        let mut here: Vec<&TextEvent> = texts.iter().filter(|t| t.anchor == *frame_id).collect();
        here.sort_by_key(|t| t.order);
        for t in here {
            let swapped = t.tokens != t.original_tokens;
            if t.shifted || swapped {
                markers.push(DisruptedSpan {
                    ordinal,
                    anchor: t.anchor,
                    original_anchor: t.original_anchor,
                    shifted: t.shifted,
                    swapped,
                });
            }
            events.push(StreamEvent::Text {
                anchor: t.anchor,
                kind: t.kind,
                tokens: t.tokens.clone(),
            });
            ordinal += 1;
        }
    }
    Ok((
        StreamSample {
            duration: sample.duration,
            events,
        },
        markers,
    ))
}

/// Drops supervision around disrupted spans: LM labels over the span, and
/// EOS labels at the anchor frame and the frame after it.
pub fn mask_disrupted(seq: &InterleavedSequence, markers: &[DisruptedSpan]) -> Result<InterleavedSequence> {
    let mut out = seq.clone();
    for m in markers {
        let span = seq
            .spans
            .iter()
            .find(|s| s.ordinal == m.ordinal)
            .ok_or_else(|| Error::Sample(format!("no text span with ordinal {}", m.ordinal)))?;
        for j in span.range.clone() {
            out.lm[j] = false;
        }
        let fi = seq
            .frames
            .iter()
            .position(|f| f.frame_id == span.anchor)
            .ok_or_else(|| Error::Sample(format!("anchor frame {} missing", span.anchor)))?;
        for f in seq.frames.iter().skip(fi).take(2) {
            let last = f.range.end - 1;
            debug_assert_eq!(seq.roles[last], TokenRole::FrameLast);
            out.stream[last] = false;
        }
    }
    Ok(out)
}

/// Appends `step,lm_loss,eos_loss,total,lr` rows.
pub struct TrainingLog {
    out: BufWriter<File>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step,lm_loss,eos_loss,total,lr";

    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(Self { out })
    }

    pub fn row(&mut self, step: usize, loss: &LossBreakdown, lr: f64) -> Result<()> {
        writeln!(
            self.out,
            "{step},{:.8},{:.8},{:.8},{lr}",
            loss.lm_loss, loss.eos_loss, loss.total
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use crate::numerics::Parameter;
    use crate::sequence::interleave;
    use crate::END_OF_RESPONSE_ID;

    fn frame(id: usize, tokens: Vec<usize>) -> StreamEvent {
        StreamEvent::Frame { frame_id: id, tokens }
    }

    fn response(anchor: usize, tokens: Vec<usize>) -> StreamEvent {
        StreamEvent::Text {
            anchor,
            kind: SpanKind::Response,
            tokens,
        }
    }

    /// Rows are log-probabilities, so softmax gives the probabilities back.
    fn log_prob_rows(rows: &[[f64; 6]]) -> Tensor<f64> {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Tensor::from_vec(rows.len(), 6, data).unwrap()
    }

    /// frame(2 tokens), response [5, EOR], frame(2 tokens)
    fn six_tokens() -> InterleavedSequence {
        let sample = StreamSample {
            duration: 2,
            events: vec![
                frame(0, vec![2, 3]),
                response(0, vec![5, END_OF_RESPONSE_ID]),
                frame(1, vec![4, 2]),
            ],
        };
        interleave(&sample, 2).unwrap()
    }

    #[test]
    fn handcrafted_sequence_matches_manual_cross_entropy() {
        let seq = six_tokens();
        let u = [1.0 / 6.0; 6];
        let logits = log_prob_rows(&[
            u,
            [0.1, 0.1, 0.1, 0.1, 0.1, 0.5],
            [0.05, 0.25, 0.2, 0.2, 0.2, 0.1],
            u,
            u,
            [0.8, 0.04, 0.04, 0.04, 0.04, 0.04],
        ]);
        let lb = streaming_loss(&logits, &seq, 1.0, Normalization::PerTerm).unwrap();
        let lm = (-(0.5f64.ln()) - 0.25f64.ln()) / 2.0;
        let eos = -(0.8f64.ln());
        assert_eq!((lb.lm_count, lb.eos_count), (2, 1));
        assert!((lb.lm_loss - lm).abs() < 1e-10);
        assert!((lb.eos_loss - eos).abs() < 1e-10);
        assert!((lb.total - (lm + eos)).abs() < 1e-10);

        let g = streaming_loss(&logits, &seq, 1.0, Normalization::SequenceLength).unwrap();
        assert!((g.total - (-(0.5f64.ln()) - 0.25f64.ln() - 0.8f64.ln()) / 6.0).abs() < 1e-10);
    }

    #[test]
    fn single_eos_at_one_half() {
        let sample = StreamSample {
            duration: 1,
            events: vec![frame(0, vec![2, 3])],
        };
        let seq = interleave(&sample, 2).unwrap();
        let logits = log_prob_rows(&[[0.2; 6], [0.5, 0.1, 0.1, 0.1, 0.1, 0.1]]);
        let lb = streaming_loss(&logits, &seq, 1.0, Normalization::PerTerm).unwrap();
        assert!((lb.eos_loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(lb.lm_loss, 0.0);
        assert_eq!(lb.lm_count, 0);
    }

    #[test]
    fn certain_response_costs_nothing() {
        let sample = StreamSample {
            duration: 1,
            events: vec![frame(0, vec![2, 3]), response(0, vec![END_OF_RESPONSE_ID])],
        };
        let seq = interleave(&sample, 2).unwrap();
        let mut logits = Tensor::<f64>::full(3, 6, -1e4);
        logits.set(1, END_OF_RESPONSE_ID, 0.0);
        let lb = streaming_loss(&logits, &seq, 1.0, Normalization::PerTerm).unwrap();
        assert_eq!(lb.total, 0.0);
        assert_eq!(lb.eos_count, 0);
    }

    #[test]
    fn total_is_affine_in_sigma() {
        let seq = six_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::<f64>::randn(6, 6, 1.0, &mut rng);
        let at = |s| streaming_loss(&logits, &seq, s, Normalization::PerTerm).unwrap();
        let (a, b, c) = (at(0.0), at(1.0), at(2.0));
        assert!((b.total - a.total - a.eos_loss).abs() < 1e-12);
        assert!((c.total - b.total - a.eos_loss).abs() < 1e-12);
    }

    #[test]
    fn row_mismatch_is_an_error() {
        let logits = Tensor::<f64>::zeros(5, 6);
        assert!(streaming_loss(&logits, &six_tokens(), 1.0, Normalization::PerTerm).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss_and_gradients() {
        let seq = six_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::<f64>::randn(6, 6, 1.0, &mut rng);
        for norm in [Normalization::PerTerm, Normalization::SequenceLength] {
            let expect = streaming_loss(&logits, &seq, 0.7, norm).unwrap();
            let mut tape = Tape::new();
            let v = tape.param(&logits);
            let (_, lb) = streaming_loss_on_tape(&mut tape, v, &seq, 0.7, norm).unwrap();
            assert!((lb.total - expect.total).abs() < 1e-12);

            let params = vec![Parameter::new("logits", logits.clone())];
            let report = check_gradients(&params, 1e-5, |tape, vars| {
                streaming_loss_on_tape(tape, vars[0], &seq, 0.7, norm).map(|(t, _)| t)
            })
            .unwrap();
            assert!(report.passes(1e-6), "{report:?}");
        }
    }

    fn two_span_sample() -> StreamSample {
        StreamSample {
            duration: 6,
            events: vec![
                frame(0, vec![2, 3]),
                frame(1, vec![2, 3]),
                response(1, vec![10, END_OF_RESPONSE_ID]),
                frame(2, vec![2, 3]),
                frame(3, vec![2, 3]),
                response(3, vec![11, 12, END_OF_RESPONSE_ID]),
                frame(4, vec![2, 3]),
                frame(5, vec![2, 3]),
            ],
        }
    }

    #[test]
    fn identity_config_leaves_sample_alone() {
        let s = two_span_sample();
        let cfg = AugmentationConfig {
            shift_window: 0,
            replace_prob: 0.0,
            seed: 3,
        };
        let (out, markers) = augment_stream(&s, &cfg).unwrap();
        assert_eq!(out, s);
        assert!(markers.is_empty());
    }

    #[test]
    fn single_span_shift_replays_the_seeded_offset() {
        let s = StreamSample {
            duration: 8,
            events: (0..8)
                .flat_map(|f| {
                    let mut v = vec![frame(f, vec![2, 3])];
                    if f == 4 {
                        v.push(response(4, vec![9, END_OF_RESPONSE_ID]));
                    }
                    v
                })
                .collect(),
        };
        for seed in 0..20 {
            let cfg = AugmentationConfig {
                shift_window: 2,
                replace_prob: 1.0,
                seed,
            };
            // replay the generator: the keep draw, the branch draw, the offset
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert!(rng.random_bool(1.0));
            let _branch = rng.random_range(0..3u8);
            let offset = rng.random_range(-2i64..=2);
            let (out, markers) = augment_stream(&s, &cfg).unwrap();
            let anchor = out
                .events
                .iter()
                .find_map(|e| match e {
                    StreamEvent::Text { anchor, .. } => Some(*anchor),
                    _ => None,
                })
                .unwrap();
            assert_eq!(anchor as i64, 4 + offset);
            assert_eq!(markers.len(), usize::from(offset != 0));
            out.validate().unwrap();
        }
    }

    #[test]
    fn shifts_clamp_to_the_stream() {
        let s = StreamSample {
            duration: 2,
            events: vec![
                frame(0, vec![2, 3]),
                response(0, vec![9, END_OF_RESPONSE_ID]),
                frame(1, vec![2, 3]),
            ],
        };
        for seed in 0..30 {
            let cfg = AugmentationConfig {
                shift_window: 5,
                replace_prob: 1.0,
                seed,
            };
            let (out, _) = augment_stream(&s, &cfg).unwrap();
            out.validate().unwrap();
        }
    }

    #[test]
    fn swap_exchanges_contents_and_keeps_anchors() {
        let s = two_span_sample();
        let mut seen_swap = false;
        for seed in 0..40 {
            let cfg = AugmentationConfig {
                shift_window: 0,
                replace_prob: 1.0,
                seed,
            };
            let (out, markers) = augment_stream(&s, &cfg).unwrap();
            let spans: Vec<(usize, Vec<usize>)> = out
                .events
                .iter()
                .filter_map(|e| match e {
                    StreamEvent::Text { anchor, tokens, .. } => Some((*anchor, tokens.clone())),
                    _ => None,
                })
                .collect();
            assert_eq!(spans.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 3]);
            if markers.iter().any(|m| m.swapped) {
                seen_swap = true;
                assert_eq!(spans[0].1, vec![11, 12, END_OF_RESPONSE_ID]);
                assert_eq!(spans[1].1, vec![10, END_OF_RESPONSE_ID]);
                assert_eq!(markers.len(), 2);
            }
        }
        assert!(seen_swap);
    }

    #[test]
    fn masking_rules() {
        let s = two_span_sample();
        let seq = interleave(&s, 2).unwrap();
        assert_eq!(mask_disrupted(&seq, &[]).unwrap(), seq);

        let m = DisruptedSpan {
            ordinal: 1,
            anchor: 3,
            original_anchor: 3,
            shifted: true,
            swapped: false,
        };
        let masked = mask_disrupted(&seq, std::slice::from_ref(&m)).unwrap();
        let span = seq.spans[1].range.clone();
        assert!(span.clone().all(|j| !masked.lm[j]));
        let last_of = |f: usize| seq.frames[f].range.end - 1;
        assert!(!masked.stream[last_of(3)] && !masked.stream[last_of(4)]);
        assert!(seq.stream[last_of(4)]);
        for j in 0..seq.len() {
            assert!(!masked.lm[j] || seq.lm[j]);
            assert!(!masked.stream[j] || seq.stream[j]);
        }

        let all = vec![
            DisruptedSpan {
                ordinal: 0,
                anchor: 1,
                ..m.clone()
            },
            m,
        ];
        assert_eq!(mask_disrupted(&seq, &all).unwrap().lm_count(), 0);
    }

    #[test]
    fn training_log_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = TrainingLog::create(&path).unwrap();
        log.row(
            1,
            &LossBreakdown {
                total: 2.0,
                ..Default::default()
            },
            0.01,
        )
        .unwrap();
        log.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TrainingLog::HEADER);
        assert!(lines[1].starts_with("1,0.00000000,0.00000000,2.00000000,0.01"));
    }
}
