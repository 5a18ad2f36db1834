//! Pre-norm decoder with per-frame vision-token routing.
//!
//! A layer's residual branch is `f(X̂) = a + FFN(LN2(X̂ + a))` with
//! `a = Attn(LN1(X̂))`, where `X̂` is the set of tokens the layer processes in
//! original order. Attention is causal within `X̂` (plus that layer's cached
//! entries); tokens outside `X̂` leave the layer unchanged.

mod cache;
mod config;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::router::{GateActivation, ScaleMode};
pub use cache::{KvCache, LayerCache};
pub use config::{
    build_layer_schedule, Insertion, KeepStrategy, LayerKind, LayerSchedule, ModelConfig, DEFAULT_EARLY_EXIT,
    SHALLOW_LAYERS,
};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::{Element, ParamStore, Tape, Tensor, Var, INIT_STD};
use crate::router::{decide_frame, keep_count, RouterDecision};
use crate::sequence::{InterleavedSequence, TokenRole};
use crate::{END_OF_RESPONSE_ID, EOS_ID};

/// Keys, values and positions appended to one layer's cache by a chunk.
type CacheRows<T> = (Tensor<T>, Tensor<T>, Vec<usize>);

pub const LN_EPS: f64 = 1e-5;
const CONFIG_FILE: &str = "model.toml";

#[derive(Debug, Clone, Copy)]
struct LayerParams {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    router: usize,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    tok: usize,
    pos: usize,
    layers: Vec<LayerParams>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Tokens handed to one forward call. Positions must be strictly increasing
/// and follow everything already cached.
#[derive(Debug, Clone, Copy)]
pub struct ChunkInput<'s> {
    pub ids: &'s [usize],
    pub positions: &'s [usize],
    pub roles: &'s [TokenRole],
    /// Frame id of each vision token, `None` for text.
    pub frame_of: &'s [Option<usize>],
}

impl<'s> ChunkInput<'s> {
    pub fn from_sequence(seq: &'s InterleavedSequence) -> Self {
        Self {
            ids: &seq.token_ids,
            positions: &seq.positions,
            roles: &seq.roles,
            frame_of: &seq.frame_of,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Consecutive vision rows grouped by frame: `(frame_id, rows)`.
    fn frame_groups(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, role) in self.roles.iter().enumerate() {
            if !role.is_vision() {
                continue;
            }
            let fid = self.frame_of[i].ok_or_else(|| Error::Routing(format!("vision token {i} has no frame id")))?;
            match groups.last_mut() {
                Some((g, rows)) if *g == fid && rows.last() == Some(&(i - 1)) => rows.push(i),
                _ => groups.push((fid, vec![i])),
            }
        }
        Ok(groups)
    }
}

/// Newly produced key/value rows of one layer, with their positions.
pub struct NewEntries {
    pub keys: Var,
    pub values: Var,
    pub positions: Vec<usize>,
}

pub struct TapeOutput {
    pub logits: Var,
    pub decisions: Vec<RouterDecision>,
    /// Per layer; `None` when the layer processed nothing.
    pub new_entries: Vec<Option<NewEntries>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Element> {
    pub logits: Tensor<T>,
    pub decisions: Vec<RouterDecision>,
}

/// Incremental decoding state.
#[derive(Debug, Clone)]
pub struct StreamState<T: Element> {
    pub cache: KvCache<T>,
    pub next_position: usize,
    /// Logits at the most recently consumed position.
    pub last_logits: Option<Vec<T>>,
    pub last_role: Option<TokenRole>,
}

#[derive(Debug, Clone, Copy)]
pub enum StreamInput<'s> {
    Frame { frame_id: usize, tokens: &'s [usize] },
    Text { token: usize, role: TokenRole },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Response {
    /// Decoded tokens, excluding the end-of-response marker.
    pub tokens: Vec<usize>,
    /// The model chose to stay silent.
    pub silent: bool,
    /// Decoding stopped at the length or position limit.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    config: ModelConfig,
    schedule: LayerSchedule,
    params: ParamStore<T>,
    index: ParamIndex,
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, vocab) = (config.hidden, config.ffn, config.vocab);
        let mut p = ParamStore::new();
        let mut randn = |p: &mut ParamStore<T>, name: String, r: usize, c: usize| {
            p.push(name, Tensor::randn(r, c, INIT_STD, &mut rng))
        };
        let tok = randn(&mut p, "tok_embed".into(), vocab, d);
        let pos = randn(&mut p, "pos_embed".into(), config.max_positions, d);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            let ln1_g = p.push(n("ln1.gamma"), Tensor::full(1, d, T::one()));
            let ln1_b = p.push(n("ln1.beta"), Tensor::zeros(1, d));
            let wq = randn(&mut p, n("attn.wq"), d, d);
            let wk = randn(&mut p, n("attn.wk"), d, d);
            let wv = randn(&mut p, n("attn.wv"), d, d);
            let wo = randn(&mut p, n("attn.wo"), d, d);
            let ln2_g = p.push(n("ln2.gamma"), Tensor::full(1, d, T::one()));
            let ln2_b = p.push(n("ln2.beta"), Tensor::zeros(1, d));
            let w1 = randn(&mut p, n("ffn.w1"), d, m);
            let b1 = p.push(n("ffn.b1"), Tensor::zeros(1, m));
            let w2 = randn(&mut p, n("ffn.w2"), m, d);
            let b2 = p.push(n("ffn.b2"), Tensor::zeros(1, d));
            let router = p.push(n("router.w"), Tensor::zeros(d, 1));
            layers.push(LayerParams {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
                router,
            });
        }
        let lnf_g = p.push("final_ln.gamma", Tensor::full(1, d, T::one()));
        let lnf_b = p.push("final_ln.beta", Tensor::zeros(1, d));
        let head_w = randn(&mut p, "head.w".into(), d, vocab);
        let head_b = p.push("head.b", Tensor::zeros(1, vocab));
        let schedule = config.schedule();
        Ok(Self {
            config,
            schedule,
            params: p,
            index: ParamIndex {
                tok,
                pos,
                layers,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    /// Replaces the layer schedule, keeping the weights.
    pub fn set_schedule(&mut self, schedule: LayerSchedule) -> Result<()> {
        if schedule.len() != self.config.layers {
            return Err(Error::Config(format!(
                "schedule has {} layers, model has {}",
                schedule.len(),
                self.config.layers
            )));
        }
        self.schedule = schedule;
        Ok(())
    }

    pub fn set_keep_strategy(&mut self, strategy: KeepStrategy) {
        self.config.keep_strategy = strategy;
    }

    pub fn set_scale_mode(&mut self, mode: ScaleMode) {
        self.config.scale_mode = mode;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model in another dtype.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            params: self.params.cast(),
            index: self.index.clone(),
        }
    }

    /// Rebuilds the model around a parameter store with the same layout.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        check_layout(&self.params, &params)?;
        Ok(Self { params, ..self.clone() })
    }

    pub fn stream_state(&self) -> StreamState<T> {
        StreamState {
            cache: KvCache::new(self.config.layers),
            next_position: 0,
            last_logits: None,
            last_role: None,
        }
    }

    /// Records the whole forward pass on `tape`. `vars` come from binding
    /// this model's parameters to the same tape.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        chunk: &ChunkInput<'_>,
        cache: Option<&'a KvCache<T>>,
    ) -> Result<TapeOutput> {
        let cfg = &self.config;
        let n = chunk.len();
        if n == 0 {
            return Err(Error::shape("forward", "empty input"));
        }
        if chunk.positions.len() != n || chunk.roles.len() != n || chunk.frame_of.len() != n {
            return Err(Error::shape(
                "forward",
                "ids, positions, roles and frames differ in length",
            ));
        }
        if vars.len() != self.params.len() {
            return Err(Error::shape("forward", "parameter binding does not match the model"));
        }
        if let Some(&id) = chunk.ids.iter().find(|&&id| id >= cfg.vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
        }
        if let Some(&p) = chunk.positions.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(Error::SequenceTooLong {
                len: p + 1,
                max: cfg.max_positions,
            });
        }
        if chunk.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Cache("positions must increase".into()));
        }
        if let Some(c) = cache {
            if c.layers.len() != cfg.layers {
                return Err(Error::Cache("cache layer count differs from model".into()));
            }
            for (l, lc) in c.layers.iter().enumerate() {
                if let Some(last) = lc.last_position() {
                    if last >= chunk.positions[0] {
                        return Err(Error::Cache(format!(
                            "layer {l} holds position {last}, new input starts at {}",
                            chunk.positions[0]
                        )));
                    }
                }
            }
        }

        let groups = chunk.frame_groups()?;
        let text_rows: Vec<usize> = (0..n).filter(|&i| !chunk.roles[i].is_vision()).collect();
        let vision_rows: Vec<usize> = groups.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        let ix = &self.index;

        let tok = tape.embedding(vars[ix.tok], chunk.ids)?;
        let pos = tape.gather_rows(vars[ix.pos], chunk.positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut decisions = Vec::new();
        let mut new_entries = Vec::with_capacity(cfg.layers);
        for (l, kind) in self.schedule.kinds.iter().copied().enumerate() {
            let lp = ix.layers[l];
            let mut gate: Option<Var> = None;
            let processed: Vec<usize> = match kind {
                LayerKind::Vanilla => (0..n).collect(),
                LayerKind::VisionSkipAll => text_rows.clone(),
                LayerKind::MoD { ratio } if ratio <= 0.0 => text_rows.clone(),
                LayerKind::MoD { ratio } => {
                    if vision_rows.is_empty() {
                        text_rows.clone()
                    } else {
                        let (kept, g) = self.route(
                            tape,
                            vars[lp.router],
                            x,
                            l,
                            ratio,
                            chunk,
                            &groups,
                            &vision_rows,
                            &mut decisions,
                        )?;
                        let mut rows: Vec<usize> = text_rows.iter().copied().chain(kept.iter().copied()).collect();
                        rows.sort_unstable();
                        if let Some(g) = g {
                            gate = Some(self.gate_vector(tape, g, &rows, &kept, &vision_rows)?);
                        }
                        rows
                    }
                }
            };
            if processed.is_empty() {
                new_entries.push(None);
                continue;
            }
            let full = processed.len() == n;
            let xs = if full { x } else { tape.gather_rows(x, &processed)? };
            let layer_cache = cache.map(|c| &c.layers[l]).filter(|c| !c.is_empty());
            let (f, k, v) = self.block(tape, vars, lp, xs, layer_cache)?;
            let delta = match gate {
                Some(s) => tape.row_scale(f, s)?,
                None => f,
            };
            x = if full {
                tape.add(x, delta)?
            } else {
                let spread = tape.scatter_add_rows(delta, &processed, n)?;
                tape.add(x, spread)?
            };
            new_entries.push(Some(NewEntries {
                keys: k,
                values: v,
                positions: processed.iter().map(|&i| chunk.positions[i]).collect(),
            }));
        }

        let eps = T::from_f64_lossy(LN_EPS);
        let h = tape.layer_norm(x, vars[ix.lnf_g], vars[ix.lnf_b], eps)?;
        let proj = tape.matmul(h, vars[ix.head_w])?;
        let logits = tape.add_row_bias(proj, vars[ix.head_b])?;
        Ok(TapeOutput {
            logits,
            decisions,
            new_entries,
        })
    }

    /// Picks the kept vision rows for one layer. Returns them ascending plus
    /// the per-vision-row scores `[n_v × 1]` when they scale the output.
    #[allow(clippy::too_many_arguments)]
    fn route<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        w_router: Var,
        x: Var,
        layer: usize,
        ratio: f64,
        chunk: &ChunkInput<'_>,
        groups: &[(usize, Vec<usize>)],
        vision_rows: &[usize],
        decisions: &mut Vec<RouterDecision>,
    ) -> Result<(Vec<usize>, Option<Var>)> {
        let cfg = &self.config;
        let mut gate = None;
        let mut all_scores: Vec<f64> = Vec::new();
        match cfg.keep_strategy {
            KeepStrategy::Learnable => {
                let xv = tape.gather_rows(x, vision_rows)?;
                let mu = tape.matmul(xv, w_router)?;
                all_scores = tape.value(mu).to_f64_vec();
                if cfg.scale_mode == ScaleMode::Gated {
                    gate = Some(match cfg.gate {
                        GateActivation::Identity => mu,
                        GateActivation::Sigmoid => tape.sigmoid(mu)?,
                    });
                }
            }
            KeepStrategy::Random => {
                for (_, rows) in groups {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(cfg.routing_seed, layer, chunk.positions[rows[0]]));
                    all_scores.extend((0..rows.len()).map(|_| rng.random::<f64>()));
                }
            }
            KeepStrategy::Uniform => {
                for (_, rows) in groups {
                    let v = rows.len();
                    let k = keep_count(ratio, v);
                    let mut s = vec![0.0; v];
                    for i in 0..k {
                        s[i * v / k] = 1.0;
                    }
                    all_scores.extend(s);
                }
            }
        }
        let mut kept = Vec::new();
        let mut offset = 0;
        for (fid, rows) in groups {
            let scores = all_scores[offset..offset + rows.len()].to_vec();
            offset += rows.len();
            let d = decide_frame(layer, *fid, scores, ratio);
            kept.extend(d.kept.iter().map(|&o| rows[o]));
            decisions.push(d);
        }
        Ok((kept, gate))
    }

    /// Per-processed-row multiplier: `gate(μ)` for kept vision rows, 1 for
    /// text rows.
    fn gate_vector(
        &self,
        tape: &mut Tape<'_, T>,
        scores: Var,
        processed: &[usize],
        kept: &[usize],
        vision_rows: &[usize],
    ) -> Result<Var> {
        let kept_in_vision: Vec<usize> = kept
            .iter()
            .map(|r| vision_rows.binary_search(r).expect("kept rows are vision rows"))
            .collect();
        let kept_in_processed: Vec<usize> = kept
            .iter()
            .map(|r| processed.binary_search(r).expect("kept rows are processed"))
            .collect();
        let sel = tape.gather_rows(scores, &kept_in_vision)?;
        let spread = tape.scatter_add_rows(sel, &kept_in_processed, processed.len())?;
        let mut ones = Tensor::zeros(processed.len(), 1);
        let mut any_text = false;
        for (i, r) in processed.iter().enumerate() {
            if kept.binary_search(r).is_err() {
                ones.set(i, 0, T::one());
                any_text = true;
            }
        }
        if !any_text {
            return Ok(spread);
        }
        let ones = tape.constant(ones);
        tape.add(spread, ones)
    }

    /// Residual branch of one layer over the processed rows `xs`.
    fn block<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        lp: LayerParams,
        xs: Var,
        cache: Option<&'a LayerCache<T>>,
    ) -> Result<(Var, Var, Var)> {
        let eps = T::from_f64_lossy(LN_EPS);
        let rows = tape.value(xs).rows();
        let h = tape.layer_norm(xs, vars[lp.ln1_g], vars[lp.ln1_b], eps)?;
        let q = tape.matmul(h, vars[lp.wq])?;
        let k = tape.matmul(h, vars[lp.wk])?;
        let v = tape.matmul(h, vars[lp.wv])?;
        let (keys, values, past) = match cache {
            Some(c) => {
                let (ck, cv) = match (&c.keys, &c.values) {
                    (Some(ck), Some(cv)) => (ck, cv),
                    _ => return Err(Error::Cache("non-empty layer cache without tensors".into())),
                };
                let ck = tape.constant_ref(ck);
                let cv = tape.constant_ref(cv);
                (tape.concat_rows(ck, k)?, tape.concat_rows(cv, v)?, c.len())
            }
            None => (k, v, 0),
        };
        let valid: Vec<usize> = (0..rows).map(|i| past + i + 1).collect();
        let att = tape.attention(q, keys, values, self.config.heads, valid)?;
        let a = tape.matmul(att, vars[lp.wo])?;
        let h2 = tape.add(xs, a)?;
        let z = tape.layer_norm(h2, vars[lp.ln2_g], vars[lp.ln2_b], eps)?;
        let u = tape.matmul(z, vars[lp.w1])?;
        let u = tape.add_row_bias(u, vars[lp.b1])?;
        let u = tape.gelu(u)?;
        let o = tape.matmul(u, vars[lp.w2])?;
        let o = tape.add_row_bias(o, vars[lp.b2])?;
        let f = tape.add(a, o)?;
        Ok((f, k, v))
    }

    fn check_sequence(&self, seq: &InterleavedSequence) -> Result<()> {
        if seq.frame_tokens != self.config.frame_tokens {
            return Err(Error::Config(format!(
                "sequence has {} tokens per frame, model expects {}",
                seq.frame_tokens, self.config.frame_tokens
            )));
        }
        if seq.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Whole-sequence forward without gradients.
    pub fn forward_full(&self, seq: &InterleavedSequence) -> Result<ForwardOutput<T>> {
        self.check_sequence(seq)?;
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &vars, &ChunkInput::from_sequence(seq), None)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            decisions: out.decisions,
        })
    }

    /// Forward on a recording tape for training.
    pub fn forward_sequence_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        seq: &InterleavedSequence,
    ) -> Result<TapeOutput> {
        self.check_sequence(seq)?;
        self.forward_on_tape(tape, vars, &ChunkInput::from_sequence(seq), None)
    }

    /// Consumes one frame or one text token, extending the cache.
    pub fn forward_stream_step(&self, state: &mut StreamState<T>, input: StreamInput<'_>) -> Result<ForwardOutput<T>> {
        let v = self.config.frame_tokens;
        let (ids, roles, frame_of): (Vec<usize>, Vec<TokenRole>, Vec<Option<usize>>) = match input {
            StreamInput::Frame { frame_id, tokens } => {
                if tokens.len() != v {
                    return Err(Error::shape(
                        "forward_stream_step",
                        format!("frame has {} tokens, expected {v}", tokens.len()),
                    ));
                }
                let roles = (0..v)
                    .map(|i| {
                        if i + 1 == v {
                            TokenRole::FrameLast
                        } else {
                            TokenRole::VisionPatch
                        }
                    })
                    .collect();
                (tokens.to_vec(), roles, vec![Some(frame_id); v])
            }
            StreamInput::Text { token, role } => {
                if role.is_vision() {
                    return Err(Error::Routing("text input with a vision role".into()));
                }
                (vec![token], vec![role], vec![None])
            }
        };
        let positions: Vec<usize> = (state.next_position..state.next_position + ids.len()).collect();
        let chunk = ChunkInput {
            ids: &ids,
            positions: &positions,
            roles: &roles,
            frame_of: &frame_of,
        };
        let (logits, decisions, entries) = {
            let mut tape = Tape::inference();
            let vars = self.params.bind(&mut tape);
            let out = self.forward_on_tape(&mut tape, &vars, &chunk, Some(&state.cache))?;
            let entries: Vec<Option<CacheRows<T>>> = out
                .new_entries
                .into_iter()
                .map(|e| e.map(|e| (tape.value(e.keys).clone(), tape.value(e.values).clone(), e.positions)))
                .collect();
            (tape.value(out.logits).clone(), out.decisions, entries)
        };
        for (layer, e) in state.cache.layers.iter_mut().zip(entries) {
            if let Some((k, v, p)) = e {
                layer.append(k, v, &p)?;
            }
        }
        state.next_position += ids.len();
        state.last_logits = Some(logits.row_slice(logits.rows() - 1).to_vec());
        state.last_role = roles.last().copied();
        Ok(ForwardOutput { logits, decisions })
    }

    /// Greedy decoding after a frame. Each emitted token and the closing
    /// end-of-response marker are appended to the cache as response text.
    pub fn generate_response(&self, state: &mut StreamState<T>, max_len: usize) -> Result<Response> {
        let Some(last) = state.last_logits.as_ref() else {
            return Err(Error::Cache("no token consumed yet".into()));
        };
        if state.last_role != Some(TokenRole::FrameLast) {
            return Err(Error::Cache("decoding must start right after a frame".into()));
        }
        let mut next = argmax(last);
        if next == EOS_ID {
            return Ok(Response {
                silent: true,
                ..Default::default()
            });
        }
        let mut out = Response::default();
        loop {
            if next == END_OF_RESPONSE_ID {
                if state.next_position < self.config.max_positions {
                    self.feed_response(state, END_OF_RESPONSE_ID)?;
                } else {
                    out.truncated = true;
                }
                break;
            }
            if next == EOS_ID {
                break;
            }
            if out.tokens.len() >= max_len || state.next_position >= self.config.max_positions {
                out.truncated = true;
                break;
            }
            out.tokens.push(next);
            self.feed_response(state, next)?;
            next = argmax(state.last_logits.as_ref().expect("just consumed a token"));
        }
        Ok(out)
    }

    fn feed_response(&self, state: &mut StreamState<T>, token: usize) -> Result<()> {
        self.forward_stream_step(
            state,
            StreamInput::Text {
                token,
                role: TokenRole::TextResponse,
            },
        )?;
        Ok(())
    }

    /// Writes weights, the config and the active schedule.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = vec![("schedule".to_string(), self.schedule.to_string())];
        write_checkpoint(dir, &self.params, &meta)?;
        let text = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join(CONFIG_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (params, meta) = read_checkpoint::<T>(dir)?;
        let mut model = Self::new(config, 0)?;
        check_layout(&model.params, &params)?;
        model.params = params;
        if let Some((_, s)) = meta.iter().find(|(k, _)| k == "schedule") {
            model.set_schedule(s.parse()?)?;
        }
        Ok(model)
    }
}

fn check_layout<T: Element>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for (a, b) in expected.iter().zip(got.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(())
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Seed for one frame's random keep scores; depends only on the frame's
/// first position so streaming and full passes agree.
fn mix_seed(seed: u64, layer: usize, position: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (position as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}
