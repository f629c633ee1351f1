use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct FiniteDiff {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub loss: f64,
}

fn evaluate<F, E>(f: &mut F, params: &[Tensor], grads: bool) -> Result<(f64, Vec<Vec<f64>>), E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item().ok_or_else(|| TensorError::NotScalar {
        shape: g.value(loss).shape().to_vec(),
    })?;
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let analytic = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, analytic))
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar. The relative error of a coordinate is
/// `|a - n| / (|a| + |n| + 1e-12)`; the maximum over the sampled coordinates
/// is reported. Coordinate sampling is driven by `cfg.seed`.
pub fn finite_diff_check<F, E>(mut f: F, params: &[Tensor], cfg: &FiniteDiff) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if cfg.eps <= 0.0 || !cfg.eps.is_finite() {
        return Err(TensorError::InvalidArgument("finite-difference step must be > 0".into()).into());
    }
    let (base, analytic) = evaluate(&mut f, params, true)?;
    let (again, _) = evaluate(&mut f, params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Nondeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        loss: base,
    };
    for (ti, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for c in coords {
            let orig = p.values()[c];
            work[ti].values_mut()[c] = orig + cfg.eps;
            let (plus, _) = evaluate(&mut f, &work, false)?;
            work[ti].values_mut()[c] = orig - cfg.eps;
            let (minus, _) = evaluate(&mut f, &work, false)?;
            work[ti].values_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[ti][c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((ti, c));
                }
            }
        }
    }
    Ok(report)
}
