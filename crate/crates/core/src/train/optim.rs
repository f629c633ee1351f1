use crate::autodiff::Tensor;

/// Adam with decoupled weight decay.
///
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)` with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores saved moments; shapes must match the current state.
    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) -> Result<(), String> {
        let same =
            |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err("optimizer state does not match the parameter shapes".into());
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// One update from the gradients stored on `params`; missing gradients
    /// count as zero.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.values_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Tensor {
        Tensor::vector(values).unwrap().with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut ps = vec![param(vec![1.0, -2.0, 0.5])];
        ps[0].set_grad(vec![0.0; 3]).unwrap();
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut ps, 0.1);
        assert_eq!(
            ps[0].values(),
            &[1.0 - 0.1 * 0.01, -2.0 + 0.1 * 0.02, 0.5 - 0.1 * 0.005]
        );

        let mut ps = vec![param(vec![1.0, -2.0, 0.5])];
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut ps, 0.1);
        assert_eq!(ps[0].values(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // m̂/√v̂ = g/|g| on the first step
        let mut ps = vec![param(vec![0.0, 0.0])];
        ps[0].set_grad(vec![3.0, -0.25]).unwrap();
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 0.0, 0.0);
        opt.step(&mut ps, 0.01);
        let v = ps[0].values();
        assert!((v[0] + 0.01).abs() < 1e-15 && (v[1] - 0.01).abs() < 1e-15, "{v:?}");
    }

    #[test]
    fn matches_reference_update() {
        // two steps, hand-expanded
        let (b1, b2, eps, wd, lr): (f64, f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.01, 0.05);
        let mut ps = vec![param(vec![0.7])];
        let mut opt = AdamW::new(&ps, b1, b2, eps, wd);
        let mut x = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 0.3), (2, -0.8)] {
            ps[0].zero_grad();
            ps[0].set_grad(vec![g]).unwrap();
            opt.step(&mut ps, lr);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * (mh / (vh.sqrt() + eps) + wd * x);
            assert_eq!(ps[0].values()[0], x);
        }
    }
}
