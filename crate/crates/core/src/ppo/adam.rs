//! Adam optimizer over [`PolicyParams`] tensors.

use super::net::PolicyParams;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PolicyParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::new(3, &[4], 2, &mut rng);
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = Adam::new(&p, 1e-3);
        for _ in 0..5 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::new(3, &[4], 2, &mut rng);
        let before = p.to_flat();
        let mut g = p.zeros_like();
        g.value_head.b[0] = 0.37;
        let mut opt = Adam::new(&p, 1e-3);
        opt.step(&mut p, &g);
        let after = p.to_flat();
        let last = after.len() - 1;
        assert!((before[last] - after[last] - 1e-3).abs() < 1e-9);
        assert_eq!(&before[..last], &after[..last]);
    }
}
