//! Per-layer vision-token router.
//!
//! Each routed layer owns a weight vector `w`; a vision token's score is the
//! raw projection `w · x` of its hidden state. Within every frame the
//! `⌈r·V⌉` highest-scoring tokens are processed by the layer, ties going to
//! the lower index. Text tokens are never candidates: they are always
//! processed.
//!
//! A processed vision token leaves the layer as `gate(μ)·f(X̂) + x`, a
//! skipped one as `x`. The selection itself carries no gradient; the router
//! learns through the `gate(μ)` multiplier.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    /// The raw score multiplies the block output.
    #[default]
    Identity,
    Sigmoid,
}

impl GateActivation {
    pub fn apply<T: Element>(self, mu: T) -> T {
        match self {
            GateActivation::Identity => mu,
            GateActivation::Sigmoid => kernels::sigmoid(mu),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    #[default]
    Gated,
    /// Processed tokens get `f(X̂) + x`; only used to compare against plain
    /// layers.
    Unit,
}

#[derive(Debug, Clone)]
pub struct RouterParams<T: Element> {
    /// `[d × 1]`
    pub w_theta: Tensor<T>,
    pub gate: GateActivation,
    pub scale_mode: ScaleMode,
}

/// Selection record for one frame at one routed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub layer: usize,
    pub frame_id: usize,
    pub keep_ratio: f64,
    pub scores: Vec<f64>,
    /// Largest skipped score; `None` when the whole frame is kept.
    pub threshold: Option<f64>,
    /// Kept token offsets within the frame, ascending.
    pub kept: Vec<usize>,
}

/// `⌈r·V⌉`, tolerant of the representation error in `r·V` (`0.3·10` is
/// `3.0000000000000004` in binary floating point).
pub fn keep_count(r: f64, frame_tokens: usize) -> usize {
    if r <= 0.0 {
        return 0;
    }
    let exact = r * frame_tokens as f64;
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    k.clamp(1, frame_tokens)
}

pub fn score_tokens<T: Element>(hidden: &Tensor<T>, params: &RouterParams<T>) -> Result<Vec<T>> {
    let d = hidden.cols();
    if params.w_theta.shape() != [d, 1] {
        return Err(Error::shape(
            "score_tokens",
            format!("w_theta {:?} for hidden size {d}", params.w_theta.shape()),
        ));
    }
    Ok((0..hidden.rows())
        .map(|i| kernels::dot(hidden.row_slice(i), params.w_theta.data()))
        .collect())
}

/// Indices of the `k` largest scores, ascending; ties favour the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Routes one frame.
pub fn decide_frame(layer: usize, frame_id: usize, scores: Vec<f64>, r: f64) -> RouterDecision {
    let k = keep_count(r, scores.len());
    let kept = select_topk(&scores, k);
    let threshold = (0..scores.len())
        .filter(|i| kept.binary_search(i).is_err())
        .map(|i| scores[i])
        .reduce(f64::max);
    RouterDecision {
        layer,
        frame_id,
        keep_ratio: r,
        scores,
        threshold,
        kept,
    }
}

/// Independent top-k routing of every frame. `frames` holds `(frame_id,
/// scores)`.
pub fn select_topk_per_frame(layer: usize, frames: &[(usize, Vec<f64>)], r: f64) -> Vec<RouterDecision> {
    frames
        .iter()
        .map(|(id, scores)| decide_frame(layer, *id, scores.clone(), r))
        .collect()
}

/// Next-layer value of one token.
pub fn combine_block_output<T: Element>(
    x: &[T],
    f_out: Option<&[T]>,
    mu: T,
    kept: bool,
    gate: GateActivation,
    scale_mode: ScaleMode,
) -> Result<Vec<T>> {
    match (kept, f_out) {
        (false, None) => Ok(x.to_vec()),
        (false, Some(_)) => Err(Error::Routing("block output supplied for a skipped token".into())),
        (true, None) => Err(Error::Routing("kept token has no block output".into())),
        (true, Some(f)) => {
            if f.len() != x.len() {
                return Err(Error::shape(
                    "combine_block_output",
                    format!("{} vs {}", f.len(), x.len()),
                ));
            }
            let s = match scale_mode {
                ScaleMode::Gated => gate.apply(mu),
                ScaleMode::Unit => T::one(),
            };
            Ok(x.iter().zip(f).map(|(&xi, &fi)| s * fi + xi).collect())
        }
    }
}

pub fn write_decisions(path: &Path, decisions: &[RouterDecision]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in decisions {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(w: &[f64]) -> RouterParams<f64> {
        RouterParams {
            w_theta: Tensor::from_f64(w.len(), 1, w).unwrap(),
            gate: GateActivation::Identity,
            scale_mode: ScaleMode::Gated,
        }
    }

    #[test]
    fn zero_projection_scores_zero() {
        let h = Tensor::from_f64(3, 2, &[1.0, 2.0, -3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(score_tokens(&h, &params(&[0.0, 0.0])).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn basis_projection_reads_first_coordinate() {
        let h = Tensor::from_f64(3, 2, &[0.2, 9.0, -1.0, 9.0, 3.0, 9.0]).unwrap();
        assert_eq!(score_tokens(&h, &params(&[1.0, 0.0])).unwrap(), vec![0.2, -1.0, 3.0]);
    }

    #[test]
    fn scores_are_linear_in_hidden_state() {
        let h = Tensor::from_f64(2, 3, &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let doubled = Tensor::from_f64(2, 3, &[1.0, -2.0, 4.0, 3.0, 0.5, -1.5]).unwrap();
        let p = params(&[0.3, -0.2, 0.9]);
        let a = score_tokens(&h, &p).unwrap();
        let b = score_tokens(&doubled, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let h = Tensor::<f64>::zeros(2, 3);
        assert!(score_tokens(&h, &params(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn keeps_highest_scores() {
        let d = decide_frame(0, 0, vec![0.1, 0.9, 0.5, 0.7, 0.3], 0.4);
        assert_eq!(d.kept, vec![1, 3]);
        assert_eq!(d.threshold, Some(0.5));
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let d = decide_frame(0, 0, vec![0.4, -2.0, 0.0], 1.0);
        assert_eq!(d.kept, vec![0, 1, 2]);
        assert_eq!(d.threshold, None);
    }

    #[test]
    fn selection_is_per_frame() {
        // Oracle: rank each frame on its own.
        let frames = vec![(0, vec![3.0, 1.0]), (1, vec![0.5, 0.2])];
        let ds = select_topk_per_frame(2, &frames, 0.5);
        for (d, (_, s)) in ds.iter().zip(&frames) {
            let best = (0..s.len()).max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
            assert_eq!(d.kept, vec![best]);
        }
        assert_eq!(ds[0].kept, vec![0]);
        assert_eq!(ds[1].kept, vec![0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(select_topk(&[0.0; 10], 2), vec![0, 1]);
        assert_eq!(select_topk(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn keep_count_is_ceiling() {
        assert_eq!(keep_count(0.2, 10), 2);
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(0.25, 10), 3);
        assert_eq!(keep_count(0.01, 10), 1);
        assert_eq!(keep_count(1.0, 10), 10);
        assert_eq!(keep_count(0.4, 5), 2);
        assert_eq!(keep_count(0.0, 10), 0);
    }

    #[test]
    fn combine_follows_both_branches() {
        let g = GateActivation::Identity;
        let m = ScaleMode::Gated;
        assert_eq!(
            combine_block_output(&[1.0, 2.0], None, 5.0, false, g, m).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            combine_block_output(&[1.0, 2.0], Some(&[7.0, 7.0]), 0.0, true, g, m).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            combine_block_output(&[1.0, 0.0], Some(&[0.5, 0.5]), 2.0, true, g, m).unwrap(),
            vec![2.0, 1.0]
        );
        assert_eq!(
            combine_block_output(&[1.0, 0.0], Some(&[0.5, 0.5]), 2.0, true, g, ScaleMode::Unit).unwrap(),
            vec![1.5, 0.5]
        );
        let s = combine_block_output(&[0.0], Some(&[1.0]), 0.0, true, GateActivation::Sigmoid, m).unwrap();
        assert_eq!(s, vec![0.5]);
    }

    #[test]
    fn skipped_token_with_block_output_is_a_logic_error() {
        let r = combine_block_output(
            &[1.0],
            Some(&[1.0]),
            1.0,
            false,
            GateActivation::Identity,
            ScaleMode::Gated,
        );
        assert!(matches!(r, Err(Error::Routing(_))));
    }

    fn arb_scores() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 1..16)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kept_count_and_ordering(scores in arb_scores(), r in 0.01f64..=1.0) {
            let d = decide_frame(0, 0, scores.clone(), r);
            let k = (r * scores.len() as f64 - 1e-9).ceil() as usize;
            prop_assert_eq!(d.kept.len(), k.max(1));
            for &i in &d.kept {
                for j in (0..scores.len()).filter(|j| !d.kept.contains(j)) {
                    prop_assert!(scores[i] > scores[j] || (scores[i] == scores[j] && i < j));
                }
            }
        }

        #[test]
        fn frames_are_independent(a in arb_scores(), b in arb_scores(), r in 0.01f64..=1.0, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = b.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let one = select_topk_per_frame(0, &[(0, a.clone()), (1, b)], r);
            let two = select_topk_per_frame(0, &[(0, a), (1, shuffled)], r);
            prop_assert_eq!(&one[0].kept, &two[0].kept);
        }

        #[test]
        fn constant_shift_keeps_selection(scores in arb_scores(), r in 0.01f64..=1.0, c in -4.0f64..4.0) {
            // Integer-valued scores so the shift is exact in f64.
            let ints: Vec<f64> = scores.iter().map(|s| s.round()).collect();
            let shifted: Vec<f64> = ints.iter().map(|s| s + c.round()).collect();
            prop_assert_eq!(decide_frame(0, 0, ints, r).kept, decide_frame(0, 0, shifted, r).kept);
        }
    }
}
