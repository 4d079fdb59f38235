//! Adam with a per-epoch cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

/// `lr(e) = min_lr + (base_lr - min_lr) * (1 + cos(pi * e / epochs)) / 2`,
/// evaluated once per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineAnnealing {
    pub base_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
}

impl CosineAnnealing {
    pub fn new(base_lr: f64, epochs: usize) -> Self {
        CosineAnnealing {
            base_lr,
            min_lr: 0.0,
            epochs,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.base_lr;
        }
        let e = epoch.min(self.epochs) as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (PI * e / self.epochs as f64).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Moment buffers and step counter for one [`Params`] store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: CosineAnnealing,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &Params, config: AdamConfig, schedule: CosineAnnealing) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            schedule,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.second[i]
    }

    /// One bias-corrected update using the learning rate scheduled for `epoch`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], epoch: usize) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let lr = self.schedule.lr(epoch);
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> Params {
        let mut p = Params::new();
        p.add("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_params(1.5);
        let mut opt = Adam::new(&p, AdamConfig::default(), CosineAnnealing::new(1e-3, 10));
        for e in 0..3 {
            opt.step(&mut p, &[Tensor::scalar(0.0)], e).unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let lr = 1e-3;
        let mut opt = Adam::new(&p, AdamConfig::default(), CosineAnnealing::new(lr, 10));
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0).unwrap();
        // mhat = 1, vhat = 1 -> update = lr / (1 + eps)
        let moved = -p.tensors()[0].data()[0];
        assert!((moved - lr / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trajectory_matches_hand_recurrence() {
        // f(x) = x^2, grad 2x, x0 = 1, constant lr (one-epoch budget never reached).
        let lr = 0.1;
        let mut p = scalar_params(1.0);
        let mut opt = Adam::new(&p, AdamConfig::default(), CosineAnnealing::new(lr, 1000));
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * p.tensors()[0].data()[0];
            opt.step(&mut p, &[Tensor::scalar(g)], 0).unwrap();
            let gh = 2.0 * x;
            m = b1 * m + (1.0 - b1) * gh;
            v = b2 * v + (1.0 - b2) * gh * gh;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p.tensors()[0].data()[0] - x).abs() < 1e-15, "step {t}");
        }
        // Frozen from an independent scalar evaluation of the recurrence.
        assert!((x - 0.701_586_272_946_030_3).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineAnnealing::new(1e-4, 20);
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(10) - 5e-5).abs() < 1e-12);
        assert!(s.lr(20).abs() < 1e-12);
        for e in 0..20 {
            assert!(s.lr(e + 1) < s.lr(e));
        }
    }

    #[test]
    fn moment_buffers_match_parameter_shapes() {
        let mut p = Params::new();
        p.add("a", Tensor::zeros([2, 3]).unwrap());
        p.add("b", Tensor::zeros([4]).unwrap());
        let opt = Adam::new(&p, AdamConfig::default(), CosineAnnealing::new(1e-3, 1));
        assert_eq!(opt.first_moment(0).len(), 6);
        assert_eq!(opt.second_moment(1).len(), 4);
    }

    #[test]
    fn rejects_gradient_shape_mismatch() {
        let mut p = scalar_params(0.0);
        let mut opt = Adam::new(&p, AdamConfig::default(), CosineAnnealing::new(1e-3, 1));
        assert!(opt.step(&mut p, &[Tensor::zeros([2]).unwrap()], 0).is_err());
    }
}
