//! Adam with bias correction and optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// A parameter tensor paired with its gradient accumulator.
pub struct ParamGroup<'a> {
    pub params: &'a mut [f64],
    pub grads: &'a mut [f64],
}

/// Anything with trainable parameters. Groups must be returned in the same
/// order and with the same sizes on every call.
pub trait Trainable {
    fn param_groups(&mut self) -> Vec<ParamGroup<'_>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every group, then zero the gradients.
    pub fn step(&mut self, groups: Vec<ParamGroup<'_>>) -> Result<()> {
        if self.step == 0 {
            self.first = groups.iter().map(|g| vec![0.0; g.params.len()]).collect();
            self.second = self.first.clone();
        }
        if groups.len() != self.first.len() {
            return Err(shape_err!("adam tracks {} groups, got {}", self.first.len(), groups.len()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((group, m), v) in groups.into_iter().zip(&mut self.first).zip(&mut self.second) {
            if group.params.len() != m.len() || group.grads.len() != m.len() {
                return Err(shape_err!(
                    "adam group of {} params / {} grads, expected {}",
                    group.params.len(),
                    group.grads.len(),
                    m.len()
                ));
            }
            for i in 0..m.len() {
                let g = group.grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                let p = &mut group.params[i];
                *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
                group.grads[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vector {
        p: Vec<f64>,
        g: Vec<f64>,
    }

    impl Trainable for Vector {
        fn param_groups(&mut self) -> Vec<ParamGroup<'_>> {
            vec![ParamGroup { params: &mut self.p, grads: &mut self.g }]
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut v = Vector { p: vec![1.0, -2.0], g: vec![0.0, 0.0] };
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(v.param_groups()).unwrap();
        }
        assert_eq!(v.p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_approaches_lr_times_sign() {
        let lr = 0.01;
        let mut v = Vector { p: vec![0.0, 0.0], g: vec![0.0, 0.0] };
        let mut adam = Adam::new(AdamConfig::with_lr(lr));
        let mut last = v.p.clone();
        for _ in 0..200 {
            v.g = vec![0.3, -5.0];
            adam.step(v.param_groups()).unwrap();
            let deltas: Vec<f64> = v.p.iter().zip(&last).map(|(a, b)| a - b).collect();
            last = v.p.clone();
            // Closed form under a constant gradient: m_hat = g, v_hat = g^2.
            assert!((deltas[0] + lr * 0.3 / (0.3 + 1e-8)).abs() < 1e-12);
            assert!((deltas[1] - lr * 5.0 / (5.0 + 1e-8)).abs() < 1e-12);
        }
        assert!(v.g.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut v = Vector { p: vec![0.5; 4], g: vec![0.0; 4] };
            let mut adam = Adam::new(AdamConfig { weight_decay: 1e-5, ..AdamConfig::with_lr(0.05) });
            for t in 0..50 {
                v.g = v.p.iter().map(|p| p * p - t as f64 * 0.01).collect();
                adam.step(v.param_groups()).unwrap();
            }
            v.p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn group_shape_change_is_error() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut v = Vector { p: vec![0.0; 2], g: vec![0.0; 2] };
        adam.step(v.param_groups()).unwrap();
        let mut w = Vector { p: vec![0.0; 3], g: vec![0.0; 3] };
        assert!(adam.step(w.param_groups()).is_err());
    }
}
