use serde::Serialize;

use super::task::GroundTruth;
use crate::error::Result;
use crate::model::{Model, Response, StreamInput, StreamState};
use crate::numerics::{kernels, Element, Tensor};
use crate::objective::lm_terms;
use crate::router::RouterDecision;
use crate::sequence::{InterleavedSequence, SpanKind, StreamEvent, StreamSample, TokenRole};

/// Anything that produces next-token logits for a whole sequence.
pub trait LogitScorer {
    fn score(&self, seq: &InterleavedSequence) -> Result<Tensor<f64>>;
}

impl<T: Element> LogitScorer for Model<T> {
    fn score(&self, seq: &InterleavedSequence) -> Result<Tensor<f64>> {
        Ok(self.forward_full(seq)?.logits.cast())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TeacherForcedMetrics {
    /// `exp` of the mean LM cross-entropy; `None` without LM positions.
    pub lm_ppl: Option<f64>,
    /// Argmax accuracy; a tie among `t` maximal logits that includes the
    /// target earns `1/t`.
    pub lm_correctness: Option<f64>,
    pub positions: usize,
}

pub fn eval_teacher_forced<S: LogitScorer + ?Sized>(
    scorer: &S,
    seqs: &[InterleavedSequence],
) -> Result<TeacherForcedMetrics> {
    let mut nll = 0.0;
    let mut correct = 0.0;
    let mut positions = 0usize;
    for seq in seqs {
        let terms = lm_terms(seq);
        if terms.is_empty() {
            continue;
        }
        let logits = scorer.score(seq)?;
        for (row, target) in terms {
            let r = logits.row_slice(row);
            nll += kernels::log_sum_exp(r) - r[target];
            let best = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if r[target] == best {
                correct += 1.0 / r.iter().filter(|&&v| v == best).count() as f64;
            }
            positions += 1;
        }
    }
    let n = positions as f64;
    Ok(TeacherForcedMetrics {
        lm_ppl: (positions > 0).then(|| (nll / n).exp()),
        lm_correctness: (positions > 0).then(|| correct / n),
        positions,
    })
}

/// A streaming agent: sees frames one at a time and may answer after each.
pub trait Responder {
    /// Called before each stream. Only oracle responders read `truth`.
    fn begin(&mut self, truth: &GroundTruth) -> Result<()>;
    /// Routing records produced while consuming the frame.
    fn observe_frame(&mut self, frame_id: usize, tokens: &[usize]) -> Result<Vec<RouterDecision>>;
    fn observe_prompt(&mut self, token: usize) -> Result<()>;
    fn respond(&mut self, max_len: usize) -> Result<Response>;
    /// Whether another frame of `frame_tokens` fits.
    fn has_room(&self, _frame_tokens: usize) -> bool {
        true
    }
}

pub struct ModelResponder<'m, T: Element> {
    model: &'m Model<T>,
    state: StreamState<T>,
}

impl<'m, T: Element> ModelResponder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            state: model.stream_state(),
        }
    }
}

impl<T: Element> Responder for ModelResponder<'_, T> {
    fn begin(&mut self, _truth: &GroundTruth) -> Result<()> {
        self.state = self.model.stream_state();
        Ok(())
    }

    fn observe_frame(&mut self, frame_id: usize, tokens: &[usize]) -> Result<Vec<RouterDecision>> {
        let out = self
            .model
            .forward_stream_step(&mut self.state, StreamInput::Frame { frame_id, tokens })?;
        Ok(out.decisions)
    }

    fn observe_prompt(&mut self, token: usize) -> Result<()> {
        self.model.forward_stream_step(
            &mut self.state,
            StreamInput::Text {
                token,
                role: TokenRole::TextPrompt,
            },
        )?;
        Ok(())
    }

    fn respond(&mut self, max_len: usize) -> Result<Response> {
        self.model.generate_response(&mut self.state, max_len)
    }

    fn has_room(&self, frame_tokens: usize) -> bool {
        self.state.next_position + frame_tokens <= self.model.config().max_positions
    }
}

/// Replays the ground-truth narrations at their onset frames.
#[derive(Default)]
pub struct OraclePlayback {
    pending: Vec<(usize, Vec<usize>)>,
    frame: usize,
}

impl Responder for OraclePlayback {
    fn begin(&mut self, truth: &GroundTruth) -> Result<()> {
        self.pending = truth
            .events
            .iter()
            .map(|e| (e.frame_id, e.narration[..e.narration.len() - 1].to_vec()))
            .collect();
        Ok(())
    }

    fn observe_frame(&mut self, frame_id: usize, _tokens: &[usize]) -> Result<Vec<RouterDecision>> {
        self.frame = frame_id;
        Ok(Vec::new())
    }

    fn observe_prompt(&mut self, _token: usize) -> Result<()> {
        Ok(())
    }

    fn respond(&mut self, _max_len: usize) -> Result<Response> {
        Ok(match self.pending.iter().find(|(f, _)| *f == self.frame) {
            Some((_, tokens)) => Response {
                tokens: tokens.clone(),
                ..Default::default()
            },
            None => Response {
                silent: true,
                ..Default::default()
            },
        })
    }
}

pub struct AlwaysSilent;

impl Responder for AlwaysSilent {
    fn begin(&mut self, _truth: &GroundTruth) -> Result<()> {
        Ok(())
    }

    fn observe_frame(&mut self, _frame_id: usize, _tokens: &[usize]) -> Result<Vec<RouterDecision>> {
        Ok(Vec::new())
    }

    fn observe_prompt(&mut self, _token: usize) -> Result<()> {
        Ok(())
    }

    fn respond(&mut self, _max_len: usize) -> Result<Response> {
        Ok(Response {
            silent: true,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamEvalConfig {
    /// Responses within this many frames of an event can match it; an
    /// unmatched event costs this many frames.
    pub window: usize,
    pub max_response: usize,
    pub frame_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamMetrics {
    pub time_diff: f64,
    pub fluency: f64,
    /// Share of kept vision tokens that carry signal, over signal-bearing
    /// frames. `None` without routing records on such frames.
    pub router_precision: Option<f64>,
    pub events: usize,
    pub matched: usize,
    pub responses: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedResponse {
    pub frame_id: usize,
    pub tokens: Vec<usize>,
}

/// Matches each ground-truth event, in order, to the earliest unused
/// response within the window. Returns `(time_diff sum, exact tokens,
/// matched)`.
pub fn match_responses(truth: &GroundTruth, responses: &[EmittedResponse], window: usize) -> (f64, usize, usize) {
    let mut used = vec![false; responses.len()];
    let (mut diff, mut exact, mut matched) = (0.0, 0, 0);
    for ev in &truth.events {
        let hit = responses
            .iter()
            .enumerate()
            .filter(|(i, r)| !used[*i] && r.frame_id.abs_diff(ev.frame_id) <= window)
            .min_by_key(|(_, r)| r.frame_id);
        match hit {
            Some((i, r)) => {
                used[i] = true;
                matched += 1;
                diff += r.frame_id.abs_diff(ev.frame_id) as f64;
                let words = &ev.narration[..ev.narration.len() - 1];
                exact += words.iter().zip(&r.tokens).filter(|(a, b)| a == b).count();
            }
            None => diff += window as f64,
        }
    }
    (diff, exact, matched)
}

pub fn eval_streaming<R: Responder + ?Sized>(
    responder: &mut R,
    data: &[(StreamSample, GroundTruth)],
    cfg: &StreamEvalConfig,
) -> Result<StreamMetrics> {
    let (mut diff, mut exact, mut words, mut events, mut matched, mut responses) = (0.0, 0, 0, 0, 0, 0);
    let (mut hits, mut kept) = (0usize, 0usize);
    for (sample, truth) in data {
        responder.begin(truth)?;
        let mut emitted = Vec::new();
        for ev in &sample.events {
            match ev {
                StreamEvent::Frame { frame_id, tokens } => {
                    if !responder.has_room(cfg.frame_tokens) {
                        break;
                    }
                    let decisions = responder.observe_frame(*frame_id, tokens)?;
                    if let Some(slots) = truth.signal_slots.get(*frame_id).filter(|s| !s.is_empty()) {
                        for d in &decisions {
                            kept += d.kept.len();
                            hits += d.kept.iter().filter(|k| slots.binary_search(k).is_ok()).count();
                        }
                    }
                    let r = responder.respond(cfg.max_response)?;
                    if !r.silent {
                        emitted.push(EmittedResponse {
                            frame_id: *frame_id,
                            tokens: r.tokens,
                        });
                    }
                }
                StreamEvent::Text {
                    kind: SpanKind::Prompt,
                    tokens,
                    ..
                } => {
                    for &t in tokens {
                        responder.observe_prompt(t)?;
                    }
                }
                StreamEvent::Text { .. } => {}
            }
        }
        let (d, e, m) = match_responses(truth, &emitted, cfg.window);
        diff += d;
        exact += e;
        matched += m;
        events += truth.events.len();
        words += truth.events.iter().map(|e| e.narration.len() - 1).sum::<usize>();
        responses += emitted.len();
    }
    Ok(StreamMetrics {
        time_diff: if events == 0 { 0.0 } else { diff / events as f64 },
        fluency: if words == 0 { 0.0 } else { exact as f64 / words as f64 },
        router_precision: (kept > 0).then(|| hits as f64 / kept as f64),
        events,
        matched,
        responses,
    })
}
