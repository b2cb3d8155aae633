use serde::{Deserialize, Serialize};

use super::Real;

/// RMSprop with Keras-style defaults (decay 0.9, no momentum, eps 1e-7).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { lr: 1e-3, decay: 0.9, momentum: 0.0, eps: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp<F> {
    pub config: RmsPropConfig,
    mean_square: Vec<F>,
    velocity: Vec<F>,
}

impl<F: Real> RmsProp<F> {
    pub fn new(config: RmsPropConfig, n: usize) -> Self {
        let velocity = if config.momentum > 0.0 { vec![F::zero(); n] } else { Vec::new() };
        Self { config, mean_square: vec![F::zero(); n], velocity }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        assert_eq!(params.len(), self.mean_square.len());
        let rho = F::from_f64_lossy(self.config.decay);
        let one_minus = F::one() - rho;
        let lr = F::from_f64_lossy(self.config.lr);
        let eps = F::from_f64_lossy(self.config.eps);
        let mom = F::from_f64_lossy(self.config.momentum);
        for i in 0..params.len() {
            let g = grad[i];
            let ms = rho * self.mean_square[i] + one_minus * g * g;
            self.mean_square[i] = ms;
            let update = lr * g / (ms.sqrt() + eps);
            if self.velocity.is_empty() {
                params[i] -= update;
            } else {
                let v = mom * self.velocity[i] + update;
                self.velocity[i] = v;
                params[i] -= v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut opt = RmsProp::<f32>::new(RmsPropConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        opt.step(&mut p, &[0.0; 3]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_over_sqrt_one_minus_decay() {
        let cfg = RmsPropConfig { lr: 0.01, ..Default::default() };
        let mut opt = RmsProp::<f64>::new(cfg, 1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[2.0]);
        let expected = -0.01 * 2.0 / ((0.1f64 * 4.0).sqrt() + 1e-7);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = RmsProp::<f64>::new(RmsPropConfig { lr: 0.01, ..Default::default() }, 2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 0.05 && p[1].abs() < 0.05, "{p:?}");
    }
}
