//! Finite-difference check of the full streaming loss through a small routed
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{Insertion, Model, ModelConfig};
use crate::numerics::{check_gradients, GradCheckReport, Tape, Tensor, Var};
use crate::objective::{streaming_loss_on_tape, Normalization};
use crate::sequence::{interleave, InterleavedSequence, SpanKind, StreamEvent, StreamSample};
use crate::END_OF_RESPONSE_ID;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Euclidean norm of the analytic loss gradient over all router weights.
    pub router_grad_norm: f64,
}

impl ModelGradCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADCHECK_TOL) && self.router_grad_norm > 0.0
    }
}

/// Two MoD layers, d = 8, two heads, three frames of five tokens, r = 0.4.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab: 12,
        frame_tokens: 5,
        insertion: Insertion::All,
        keep_ratio: 0.4,
        max_positions: 32,
        ..Default::default()
    }
}

/// Three frames with a two-token response after the second.
fn gradcheck_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<InterleavedSequence> {
    let mut tok = || rng.random_range(2..cfg.vocab);
    let mut frame = |id| StreamEvent::Frame {
        frame_id: id,
        tokens: (0..cfg.frame_tokens).map(|_| tok()).collect(),
    };
    let (f0, f1, f2) = (frame(0), frame(1), frame(2));
    let word = rng.random_range(2..cfg.vocab);
    let sample = StreamSample {
        duration: 3,
        events: vec![
            f0,
            f1,
            StreamEvent::Text {
                anchor: 1,
                kind: SpanKind::Response,
                tokens: vec![word, END_OF_RESPONSE_ID],
            },
            f2,
        ],
    };
    interleave(&sample, cfg.frame_tokens)
}

fn loss<'m>(
    model: &'m Model<f64>,
    seq: &'m InterleavedSequence,
    tape: &mut Tape<'m, f64>,
    vars: &[Var],
) -> Result<Var> {
    let out = model.forward_sequence_on_tape(tape, vars, seq)?;
    streaming_loss_on_tape(tape, out.logits, seq, 0.7, Normalization::PerTerm).map(|(t, _)| t)
}

/// Every parameter is redrawn so pre-activations stay near unit scale:
/// matrices with std `1/sqrt(fan_in)`, embeddings and router weights with std
/// 0.5, biases with std 0.1 and gammas around 1. Saturated units would leave
/// gradients below the round-off floor of the difference quotient.
pub fn gradcheck_model(seed: u64) -> Result<ModelGradCheck> {
    let cfg = gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    for p in model.params_mut().iter_mut() {
        let name = p.name.as_str();
        let (base, std) = if name.ends_with(".gamma") {
            (1.0, 0.1)
        } else if name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
            (0.0, 0.1)
        } else if name.ends_with("embed") || name.ends_with("router.w") {
            (0.0, 0.5)
        } else {
            (0.0, 1.0 / (p.value.rows() as f64).sqrt())
        };
        let normal = Normal::new(base, std).expect("valid std");
        for v in p.value.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let seq = gradcheck_sequence(&mut rng, &cfg)?;
    let report = check_gradients(model.params().as_slice(), GRADCHECK_EPS, |tape, vars| {
        loss(&model, &seq, tape, vars)
    })?;

    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let total = loss(&model, &seq, &mut tape, &vars)?;
    let grads = tape.backward(total)?;
    let router_grad_norm = model
        .params()
        .iter()
        .zip(&vars)
        .filter(|(p, _)| p.name.ends_with("router.w"))
        .filter_map(|(_, v)| grads.get(*v).map(Tensor::data))
        .flat_map(|g| g.iter().map(|x| x * x))
        .sum::<f64>()
        .sqrt();
    Ok(ModelGradCheck {
        report,
        router_grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_routed_model_passes() {
        for seed in 0..3 {
            let g = gradcheck_model(seed).unwrap();
            assert!(
                g.passes(),
                "seed {seed}: {:?} router {}",
                g.report.max_rel_err,
                g.router_grad_norm
            );
        }
    }
}
