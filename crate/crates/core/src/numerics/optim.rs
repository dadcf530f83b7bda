use serde::{Deserialize, Serialize};

use super::Tensor;

/// Plain gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [Tensor], grads: &[Tensor]) {
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= self.lr * d;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction; state is allocated on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * d;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * d * d;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *x -= c.lr * (update + c.weight_decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_one_step_on_square() {
        let mut x = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0 * 1.0)];
        Sgd { lr: 0.1 }.step(&mut x, &g);
        assert!((x[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let opt = Sgd { lr: 0.1 };
        let mut x = vec![Tensor::scalar(1.0)];
        for _ in 0..200 {
            let g = vec![Tensor::scalar(2.0 * x[0].item())];
            opt.step(&mut x, &g);
        }
        // x_n = 0.8^n
        assert!(x[0].item().abs() < 1e-3);
        assert!((x[0].item() - 0.8f64.powi(200)).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-4, 1.0, 250.0] {
            let mut x = vec![Tensor::scalar(0.0)];
            let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() });
            adam.step(&mut x, &[Tensor::scalar(g)]);
            assert!((x[0].item().abs() - 0.01).abs() < 1e-5, "g={g} x={}", x[0].item());
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut x = vec![Tensor::from_vec(vec![0.3, -1.2])];
            let mut adam = Adam::new(AdamConfig::default());
            for _ in 0..10 {
                let g: Vec<f64> = x[0].data().iter().map(|v| 2.0 * v).collect();
                adam.step(&mut x, &[Tensor::from_vec(g)]);
            }
            x[0].clone()
        };
        assert_eq!(run(), run());
    }
}
