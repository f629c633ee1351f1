//! Generation, feature-matching, and instruction-contrast objectives.
//!
//! Every loss exists twice: as graph operations (used for training and
//! gradient checks) and as plain `f64` arithmetic over precomputed scores
//! (used as an independent route in tests and verification).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::model::Token;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("a contrastive set needs at least one negative")]
    NoNegatives,
    #[error("positive index {index} outside a candidate set of {len}")]
    MissingPositive { index: usize, len: usize },
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("direction candidate sets differ in size: {0} vs {1}")]
    UnequalSets(usize, usize),
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("empty sequence to pool")]
    EmptyPool,
    #[error("step {t} exceeds total steps {total}")]
    StepBeyondTotal { t: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

/// Loss weights; `lambda3` ramps linearly from `lambda3_init` to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3_init: f64,
    pub total_steps: u64,
}

impl LossWeights {
    pub fn new(lambda3_init: f64, total_steps: u64) -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3_init,
            total_steps,
        }
    }

    pub fn lambda3(&self, t: u64) -> Result<f64, LossError> {
        lambda3_schedule(t, self.total_steps, self.lambda3_init)
    }
}

/// `λ3(t) = λ3' + (1 − λ3')·t/T`, written as an interpolation so that both
/// endpoints are exact.
pub fn lambda3_schedule(t: u64, total: u64, init: f64) -> Result<f64, LossError> {
    if total == 0 {
        return Err(LossError::Schedule("total steps must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&init) {
        return Err(LossError::Schedule(format!("initial weight {init} outside [0, 1]")));
    }
    if t > total {
        return Err(LossError::StepBeyondTotal { t, total });
    }
    let f = t as f64 / total as f64;
    Ok(init * (1.0 - f) + f)
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

fn check_set(len: usize, positive: usize) -> Result<(), LossError> {
    if len < 2 {
        return Err(LossError::NoNegatives);
    }
    if positive >= len {
        return Err(LossError::MissingPositive { index: positive, len });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plain-arithmetic route
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Unnormalised matching score between ID and NL `<cls>` vectors.
pub fn hfm_score(id_cls: &[f64], nl_cls: &[f64]) -> Result<f64, LossError> {
    dot(id_cls, nl_cls)
}

/// `−log softmax(scores/τ)[positive]`
pub fn contrastive_nll(scores: &[f64], positive: usize, tau: f64) -> Result<f64, LossError> {
    check_tau(tau)?;
    check_set(scores.len(), positive)?;
    let z: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - z[positive])
}

/// Bidirectional matching loss over precomputed scores: the one-hot cross
/// entropies of both directions, summed and divided by the set size `K+1`.
pub fn hfm_pair_loss_from_scores(
    i2n: &[f64],
    i2n_positive: usize,
    n2i: &[f64],
    n2i_positive: usize,
    tau: f64,
) -> Result<f64, LossError> {
    if i2n.len() != n2i.len() {
        return Err(LossError::UnequalSets(i2n.len(), n2i.len()));
    }
    let a = contrastive_nll(i2n, i2n_positive, tau)?;
    let b = contrastive_nll(n2i, n2i_positive, tau)?;
    Ok((a + b) / i2n.len() as f64)
}

/// Instruction-contrast loss over the similarities `u_0ᵀ·u_i` of the
/// `M+1` candidates.
pub fn icl_loss_from_scores(similarities: &[f64], positive: usize, tau: f64) -> Result<f64, LossError> {
    Ok(contrastive_nll(similarities, positive, tau)? / similarities.len() as f64)
}

pub fn mean_pool_rows(h: &Tensor) -> Result<Vec<f64>, LossError> {
    let (rows, cols) = h.dims2();
    if rows == 0 {
        return Err(LossError::EmptyPool);
    }
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        out.iter_mut().zip(h.row(r)).for_each(|(a, b)| *a += b);
    }
    Ok(out.into_iter().map(|v| v / rows as f64).collect())
}

pub fn total_loss_value(gen: f64, hfm: f64, icl: f64, weights: &LossWeights, t: u64) -> Result<f64, LossError> {
    let l3 = weights.lambda3(t)?;
    Ok(weights.lambda1 * gen + weights.lambda2 * hfm + l3 * icl)
}

// ---------------------------------------------------------------------------
// Graph route
// ---------------------------------------------------------------------------

/// Mean token cross-entropy; positions whose target is `pad` are skipped.
pub fn gen_loss(g: &mut Graph, logits: Var, target: &[Token], pad: Option<Token>) -> Result<Var, LossError> {
    if target.is_empty() {
        return Err(LossError::EmptyTarget);
    }
    let t: Vec<usize> = target.iter().map(|&x| x as usize).collect();
    Ok(g.cross_entropy(logits, &t, pad.map(|p| p as usize))?)
}

pub fn hfm_score_var(g: &mut Graph, id_cls: Var, nl_cls: Var) -> Result<Var, LossError> {
    let (a, b) = (g.value(id_cls).len(), g.value(nl_cls).len());
    if a != b {
        return Err(LossError::LengthMismatch(a, b));
    }
    let row = g.reshape(id_cls, vec![1, a])?;
    let col = g.reshape(nl_cls, vec![b, 1])?;
    let s = g.matmul(row, col)?;
    Ok(g.reshape(s, vec![1])?)
}

/// `−log softmax(⟨c_k, anchor⟩/τ)[positive]` with the candidates stacked.
pub fn contrastive_nll_var(
    g: &mut Graph,
    anchor: Var,
    candidates: &[Var],
    positive: usize,
    tau: f64,
) -> Result<Var, LossError> {
    check_tau(tau)?;
    check_set(candidates.len(), positive)?;
    let d = g.value(anchor).len();
    for &c in candidates {
        let n = g.value(c).len();
        if n != d {
            return Err(LossError::LengthMismatch(d, n));
        }
    }
    let stacked = g.concat_rows(candidates)?;
    let col = g.reshape(anchor, vec![d, 1])?;
    let scores = g.matmul(stacked, col)?;
    let scores = g.reshape(scores, vec![1, candidates.len()])?;
    let scaled = g.scale(scores, 1.0 / tau)?;
    Ok(g.cross_entropy(scaled, &[positive], None)?)
}

/// One side of a feature-matching pair: an anchor and the candidate set of
/// the opposite modality.
#[derive(Clone, Debug)]
pub struct MatchDirection<'a> {
    pub anchor: Var,
    pub candidates: &'a [Var],
    pub positive: usize,
}

/// Bidirectional feature-matching loss for one (ID, NL) positive pair.
pub fn hfm_pair_loss(
    g: &mut Graph,
    id_to_nl: MatchDirection<'_>,
    nl_to_id: MatchDirection<'_>,
    tau: f64,
) -> Result<Var, LossError> {
    let k1 = id_to_nl.candidates.len();
    if k1 != nl_to_id.candidates.len() {
        return Err(LossError::UnequalSets(k1, nl_to_id.candidates.len()));
    }
    let a = contrastive_nll_var(g, id_to_nl.anchor, id_to_nl.candidates, id_to_nl.positive, tau)?;
    let b = contrastive_nll_var(g, nl_to_id.anchor, nl_to_id.candidates, nl_to_id.positive, tau)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 1.0 / k1 as f64)?)
}

pub fn mean_pool(g: &mut Graph, hidden: Var) -> Result<Var, LossError> {
    if g.value(hidden).shape().len() != 2 {
        return Err(LossError::EmptyPool);
    }
    Ok(g.mean_axis(hidden, 0)?)
}

pub fn icl_loss(g: &mut Graph, target: Var, candidates: &[Var], positive: usize, tau: f64) -> Result<Var, LossError> {
    let nll = contrastive_nll_var(g, target, candidates, positive, tau)?;
    Ok(g.scale(nll, 1.0 / candidates.len() as f64)?)
}

/// Arithmetic mean of scalar losses.
pub fn mean_of(g: &mut Graph, losses: &[Var]) -> Result<Var, LossError> {
    if losses.is_empty() {
        return Err(LossError::Tensor(TensorError::InvalidArgument(
            "mean of no losses".into(),
        )));
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let stacked = g.concat_rows(losses)?;
    let s = g.sum(stacked)?;
    Ok(g.scale(s, 1.0 / losses.len() as f64)?)
}

/// `λ1·gen + λ2·hfm + λ3(t)·icl`.
pub fn total_loss(
    g: &mut Graph,
    gen: Var,
    hfm: Var,
    icl: Var,
    weights: &LossWeights,
    t: u64,
) -> Result<Var, LossError> {
    let l3 = weights.lambda3(t)?;
    let a = g.scale(gen, weights.lambda1)?;
    let b = g.scale(hfm, weights.lambda2)?;
    let c = g.scale(icl, l3)?;
    let ab = g.add(a, b)?;
    Ok(g.add(ab, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FiniteDiff};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn gen_loss_examples() {
        let mut g = Graph::new();
        // probability ~1 on each target
        let mut v = vec![-50.0; 2 * 4];
        v[1] = 50.0;
        v[4 + 3] = 50.0;
        let logits = g.constant(Tensor::matrix(2, 4, v).unwrap());
        let l = gen_loss(&mut g, logits, &[1, 3], None).unwrap();
        close(scalar(&g, l), 0.0, 1e-12);

        let uniform = g.constant(Tensor::zeros(vec![3, 8]).unwrap());
        let l = gen_loss(&mut g, uniform, &[0, 5, 7], None).unwrap();
        close(scalar(&g, l), 8f64.ln(), 1e-12);
        close(scalar(&g, l), 2.0794, 1e-4);

        let two = g.constant(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
        let l = gen_loss(&mut g, two, &[0], None).unwrap();
        close(scalar(&g, l), 4f64.ln(), 1e-12);

        assert_eq!(gen_loss(&mut g, two, &[], None).unwrap_err(), LossError::EmptyTarget);
    }

    #[test]
    fn gen_loss_skips_padding() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 9.0, -9.0]).unwrap());
        let l = gen_loss(&mut g, logits, &[1, 0], Some(0)).unwrap();
        close(scalar(&g, l), std::f64::consts::LN_2, 1e-12);
    }

    #[test]
    fn hfm_score_examples() {
        assert_eq!(hfm_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hfm_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 5.0);
        assert_eq!(hfm_score(&[0.0, 0.0, 0.0], &[3.0, -1.0, 8.0]).unwrap(), 0.0);
        assert_eq!(hfm_score(&[1.0], &[1.0, 2.0]), Err(LossError::LengthMismatch(1, 2)));

        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = hfm_score_var(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, s), 5.0);
    }

    #[test]
    fn hfm_pair_loss_uniform_scores() {
        let s = vec![0.3; 11];
        let l = hfm_pair_loss_from_scores(&s, 4, &s, 7, 0.07).unwrap();
        close(l, 2.0 * 11f64.ln() / 11.0, 1e-12);
        close(l, 0.4360, 1e-4);
    }

    #[test]
    fn hfm_pair_loss_hand_example() {
        // -ln(e^2 / (e^2 + 2)) twice, divided by K+1 = 3
        let e2 = 2f64.exp();
        let expected = 2.0 * -(e2 / (e2 + 2.0)).ln() / 3.0;
        let l = hfm_pair_loss_from_scores(&[2.0, 0.0, 0.0], 0, &[2.0, 0.0, 0.0], 0, 1.0).unwrap();
        close(l, expected, 1e-12);
        // independent evaluation: 0.159697 (not the 0.1615 sometimes quoted)
        close(l, 0.159_696_510_814_59, 1e-12);
    }

    #[test]
    fn hfm_pair_loss_errors() {
        assert_eq!(
            hfm_pair_loss_from_scores(&[1.0, 0.0], 0, &[1.0, 0.0], 0, 0.0),
            Err(LossError::Temperature(0.0))
        );
        assert_eq!(
            hfm_pair_loss_from_scores(&[1.0], 0, &[1.0], 0, 1.0),
            Err(LossError::NoNegatives)
        );
        assert!(matches!(
            hfm_pair_loss_from_scores(&[1.0, 2.0], 2, &[1.0, 2.0], 0, 1.0),
            Err(LossError::MissingPositive { .. })
        ));
    }

    #[test]
    fn hfm_loss_vanishes_with_dominant_positive() {
        let mut s = vec![0.0; 11];
        s[3] = 100.0;
        let l = hfm_pair_loss_from_scores(&s, 3, &s, 3, 1.0).unwrap();
        assert!(l < 1e-30);
    }

    #[test]
    fn graph_route_matches_score_route() {
        let vecs = [
            vec![0.5, -1.0, 0.25],
            vec![1.5, 0.0, -0.5],
            vec![-0.3, 0.8, 0.1],
            vec![0.9, 0.9, -1.2],
        ];
        let mut g = Graph::new();
        let vars: Vec<Var> = vecs
            .iter()
            .map(|v| g.constant(Tensor::vector(v.clone()).unwrap()))
            .collect();
        let id_anchor = vars[0];
        let nl_anchor = vars[1];
        let nl_cands = [vars[1], vars[2], vars[3]];
        let id_cands = [vars[3], vars[0], vars[2]];
        let l = hfm_pair_loss(
            &mut g,
            MatchDirection {
                anchor: id_anchor,
                candidates: &nl_cands,
                positive: 0,
            },
            MatchDirection {
                anchor: nl_anchor,
                candidates: &id_cands,
                positive: 1,
            },
            0.5,
        )
        .unwrap();
        let i2n: Vec<f64> = [1, 2, 3].iter().map(|&k| dot(&vecs[0], &vecs[k]).unwrap()).collect();
        let n2i: Vec<f64> = [3, 0, 2].iter().map(|&k| dot(&vecs[1], &vecs[k]).unwrap()).collect();
        let expected = hfm_pair_loss_from_scores(&i2n, 0, &n2i, 1, 0.5).unwrap();
        close(scalar(&g, l), expected, 1e-12);
    }

    #[test]
    fn hfm_task_sum_and_batch_mean() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.4).unwrap());
        let b = g.constant(Tensor::scalar(0.3).unwrap());
        let s = g.add(a, b).unwrap();
        close(scalar(&g, s), 0.7, 1e-15);

        // batch mean: oracle recomputes each pair and averages
        let pairs = [
            (vec![2.0, 0.0, 1.0], 0usize, vec![0.5, 0.5, 3.0], 2usize),
            (vec![0.0, 1.0, -1.0], 1, vec![1.0, 1.0, 1.0], 0),
        ];
        let oracle: f64 = pairs
            .iter()
            .map(|(a, pa, b, pb)| hfm_pair_loss_from_scores(a, *pa, b, *pb, 1.0).unwrap())
            .sum::<f64>()
            / 2.0;
        let mut per_pair = Vec::new();
        for (a, pa, b, pb) in &pairs {
            let va = g.constant(Tensor::matrix(1, 3, a.clone()).unwrap());
            let vb = g.constant(Tensor::matrix(1, 3, b.clone()).unwrap());
            let la = g.cross_entropy(va, &[*pa], None).unwrap();
            let lb = g.cross_entropy(vb, &[*pb], None).unwrap();
            let s = g.add(la, lb).unwrap();
            per_pair.push(g.scale(s, 1.0 / 3.0).unwrap());
        }
        let m = mean_of(&mut g, &per_pair).unwrap();
        close(scalar(&g, m), oracle, 1e-12);
    }

    #[test]
    fn mean_pool_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(mean_pool_rows(&h).unwrap(), vec![2.0, 4.0]);
        let one = Tensor::from_rows(&[vec![7.0, -1.0]]).unwrap();
        assert_eq!(mean_pool_rows(&one).unwrap(), vec![7.0, -1.0]);
        let c = Tensor::from_rows(&[vec![0.25; 3], vec![0.25; 3], vec![0.25; 3]]).unwrap();
        assert_eq!(mean_pool_rows(&c).unwrap(), vec![0.25; 3]);

        let mut g = Graph::new();
        let hv = g.constant(h);
        let p = mean_pool(&mut g, hv).unwrap();
        assert_eq!(g.value(p).values(), &[2.0, 4.0]);
    }

    #[test]
    fn icl_examples() {
        close(
            icl_loss_from_scores(&[1.0; 6], 0, 0.07).unwrap(),
            6f64.ln() / 6.0,
            1e-12,
        );
        close(icl_loss_from_scores(&[1.0; 6], 0, 0.07).unwrap(), 0.2986, 1e-4);
        let e = std::f64::consts::E;
        let l = icl_loss_from_scores(&[1.0, 0.0, 0.0], 0, 1.0).unwrap();
        close(l, -(e / (e + 2.0)).ln() / 3.0, 1e-12);
        close(l, 0.183_814_904_644_017, 1e-12);
        assert!(icl_loss_from_scores(&[60.0, 0.0, 0.0], 0, 1.0).unwrap() < 1e-25);
        assert_eq!(
            icl_loss_from_scores(&[1.0, 0.0], 0, -1.0),
            Err(LossError::Temperature(-1.0))
        );
        assert!(matches!(
            icl_loss_from_scores(&[1.0, 0.0], 5, 1.0),
            Err(LossError::MissingPositive { .. })
        ));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda3_schedule(0, 100, 0.3).unwrap(), 0.3);
        assert_eq!(lambda3_schedule(100, 100, 0.3).unwrap(), 1.0);
        close(lambda3_schedule(50, 100, 0.2).unwrap(), 0.6, 1e-15);
        assert_eq!(
            lambda3_schedule(101, 100, 0.0),
            Err(LossError::StepBeyondTotal { t: 101, total: 100 })
        );
        assert!(lambda3_schedule(0, 0, 0.0).is_err());
        assert!(lambda3_schedule(0, 10, 1.5).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::new(0.0, 10);
        assert_eq!(total_loss_value(1.0, 0.5, 0.2, &w, 0).unwrap(), 1.5);
        close(total_loss_value(1.0, 0.5, 0.2, &w, 10).unwrap(), 1.7, 1e-15);
        assert_eq!(total_loss_value(0.0, 0.0, 0.0, &w, 4).unwrap(), 0.0);

        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0).unwrap());
        let b = g.constant(Tensor::scalar(0.5).unwrap());
        let c = g.constant(Tensor::scalar(0.2).unwrap());
        let t = total_loss(&mut g, a, b, c, &w, 10).unwrap();
        close(scalar(&g, t), 1.7, 1e-15);
    }

    #[test]
    fn temperature_gradients_at_uniform_point() {
        // equal scores: value independent of tau, gradient not
        let vecs = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let anchor = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for tau in [0.1, 1.0] {
            let mut g = Graph::new();
            let c = g.param(vecs.clone());
            let a = g.param(anchor.clone());
            let rows: Vec<Var> = (0..3).map(|i| g.slice_rows(c, i, 1).unwrap()).collect();
            let rows: Vec<Var> = rows.into_iter().map(|r| g.reshape(r, vec![2]).unwrap()).collect();
            let l = icl_loss(&mut g, a, &rows, 0, tau).unwrap();
            values.push(scalar(&g, l));
            g.backward(l).unwrap();
            grads.push(g.grad(c).unwrap().to_vec());
            // the anchor gradient is exactly zero here, so only candidates are checked
            let report = finite_diff_check(
                |g: &mut Graph, p: &[Var]| -> Result<Var, LossError> {
                    let rows: Vec<Var> = (0..3)
                        .map(|i| {
                            let r = g.slice_rows(p[0], i, 1)?;
                            g.reshape(r, vec![2])
                        })
                        .collect::<Result<_, _>>()?;
                    let a = g.constant(anchor.clone());
                    icl_loss(g, a, &rows, 0, tau)
                },
                &[vecs.clone()],
                &FiniteDiff::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
        close(values[0], values[1], 1e-15);
        assert_ne!(grads[0], grads[1]);
    }

    proptest! {
        #[test]
        fn negative_order_does_not_matter(
            negs in prop::collection::vec(-3.0f64..3.0, 2..8),
            pos in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut a = vec![pos];
            a.extend(&negs);
            let mut b = negs.clone();
            let k = (seed as usize) % (b.len() + 1);
            b.insert(k, pos);
            let la = contrastive_nll(&a, 0, 0.5).unwrap();
            let lb = contrastive_nll(&b, k, 0.5).unwrap();
            prop_assert!((la - lb).abs() < 1e-12);
        }

        #[test]
        fn raising_positive_lowers_loss(
            negs in prop::collection::vec(-3.0f64..3.0, 1..8),
            pos in -3.0f64..3.0,
            delta in 0.01f64..2.0,
            tau in 0.05f64..2.0,
        ) {
            let mut a = vec![pos];
            a.extend(&negs);
            let mut b = a.clone();
            b[0] += delta;
            // strict unless the loss has already underflowed
            let (ia, ib) = (icl_loss_from_scores(&a, 0, tau).unwrap(), icl_loss_from_scores(&b, 0, tau).unwrap());
            prop_assert!(ib < ia || (ib == ia && ia < 1e-12));
            let ha = hfm_pair_loss_from_scores(&a, 0, &a, 0, tau).unwrap();
            let hb = hfm_pair_loss_from_scores(&b, 0, &b, 0, tau).unwrap();
            prop_assert!(hb < ha || (hb == ha && ha < 1e-12));
        }

        #[test]
        fn duplicate_negative_never_helps(
            negs in prop::collection::vec(-3.0f64..3.0, 1..8),
            pos in -3.0f64..3.0,
            pick in any::<usize>(),
            tau in 0.05f64..2.0,
        ) {
            let mut a = vec![pos];
            a.extend(&negs);
            let mut b = a.clone();
            b.push(negs[pick % negs.len()]);
            prop_assert!(contrastive_nll(&b, 0, tau).unwrap() >= contrastive_nll(&a, 0, tau).unwrap());
        }

        #[test]
        fn losses_are_finite_and_nonnegative(
            scores in prop::collection::vec(-50.0f64..50.0, 2..12),
            tau in 0.01f64..5.0,
            pick in any::<usize>(),
        ) {
            let p = pick % scores.len();
            let l = icl_loss_from_scores(&scores, p, tau).unwrap();
            prop_assert!(l.is_finite() && l >= 0.0);
            let h = hfm_pair_loss_from_scores(&scores, p, &scores, 0, tau).unwrap();
            prop_assert!(h.is_finite() && h >= 0.0);
        }

        #[test]
        fn schedule_is_affine_and_monotone(init in 0.0f64..=1.0, total in 1u64..10_000, t in 0u64..10_000) {
            let t = t % (total + 1);
            let a = lambda3_schedule(t, total, init).unwrap();
            prop_assert!(a >= init && a <= 1.0);
            if t < total {
                prop_assert!(lambda3_schedule(t + 1, total, init).unwrap() >= a);
            }
            prop_assert_eq!(lambda3_schedule(0, total, init).unwrap(), init);
            prop_assert_eq!(lambda3_schedule(total, total, init).unwrap(), 1.0);
        }
    }
}
