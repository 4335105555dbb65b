use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, lr: f32, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            lr,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update; `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - f64::from(beta1).powi(self.step);
        let bc2 = 1.0 - f64::from(beta2).powi(self.step);
        let lr = (f64::from(self.lr) * bc2.sqrt() / bc1) as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut w = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), 0.1, &[3]);
        opt.step(&mut [&mut w], &[&g]);
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(w.data()[2], 1.0);
    }
}
