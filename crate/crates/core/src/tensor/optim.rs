//! Optimizers and the cosine-annealed learning-rate schedule.

use super::{Param, Scalar};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// lr(t) = lr_final + 0.5 * (lr_init - lr_final) * (1 + cos(pi * t / horizon))
pub fn cosine_lr(lr_init: f64, lr_final: f64, t: usize, horizon: usize) -> f64 {
    let horizon = horizon.max(1);
    let frac = (t.min(horizon)) as f64 / horizon as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter moment buffers plus the cosine schedule.
/// The caller passes the schedule index `t` explicitly to [`Optimizer::step`];
/// internal `steps` only drives Adam bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr_init: f64,
    pub lr_final: f64,
    pub horizon: usize,
    pub weight_decay: f64,
    pub steps: u64,
    moments: Vec<Vec<f64>>,
    moments2: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr_init: f64,
        lr_final: f64,
        horizon: usize,
        weight_decay: f64,
    ) -> Self {
        Optimizer {
            kind,
            lr_init,
            lr_final,
            horizon,
            weight_decay,
            steps: 0,
            moments: Vec::new(),
            moments2: Vec::new(),
        }
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        cosine_lr(self.lr_init, self.lr_final, t, self.horizon)
    }

    fn ensure_buffers(&mut self, sizes: &[usize]) {
        if self.moments.len() != sizes.len() {
            self.moments = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.moments2 = match self.kind {
                OptimizerKind::Adam { .. } => sizes.iter().map(|&n| vec![0.0; n]).collect(),
                _ => Vec::new(),
            };
        }
    }

    /// Apply one update at schedule index `t`. `grads[i]` must align with
    /// `params[i]`; gradient buffers are consumed (the caller drops the tape).
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [Param<S>],
        grads: &[Vec<S>],
        t: usize,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer step: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        let sizes: Vec<usize> = params.iter().map(|p| p.data.len()).collect();
        self.ensure_buffers(&sizes);
        let lr = self.lr_at(t);
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let buf = &mut self.moments[pi];
                    for j in 0..p.data.len() {
                        let grad = g[j].to_f64() + self.weight_decay * p.data[j].to_f64();
                        buf[j] = momentum * buf[j] + grad;
                        let next = p.data[j].to_f64() - lr * buf[j];
                        p.data[j] = S::from_f64(next);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bias1 = 1.0 - beta1.powi(self.steps as i32);
                let bias2 = 1.0 - beta2.powi(self.steps as i32);
                for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.moments[pi];
                    let v = &mut self.moments2[pi];
                    for j in 0..p.data.len() {
                        let grad = g[j].to_f64() + self.weight_decay * p.data[j].to_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
                        let mhat = m[j] / bias1;
                        let vhat = v[j] / bias2;
                        let next = p.data[j].to_f64() - lr * mhat / (vhat.sqrt() + eps);
                        p.data[j] = S::from_f64(next);
                    }
                }
            }
        }
        for p in params.iter() {
            if !p.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
        }
        Ok(())
    }

    /// Flatten moment buffers for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (self.steps, self.moments.clone(), self.moments2.clone())
    }

    pub fn import_state(&mut self, steps: u64, moments: Vec<Vec<f64>>, moments2: Vec<Vec<f64>>) {
        self.steps = steps;
        self.moments = moments;
        self.moments2 = moments2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let (li, lf, t_max) = (1e-2, 1e-6, 200);
        assert_eq!(cosine_lr(li, lf, 0, t_max), li);
        let end = cosine_lr(li, lf, t_max, t_max);
        assert!((end - lf).abs() < 1e-18);
    }

    #[test]
    fn cosine_midpoint() {
        // At t = T/2 the schedule sits exactly halfway between the rates.
        let lr = cosine_lr(1e-2, 1e-6, 100, 200);
        assert!((lr - 5.0005e-3).abs() < 1e-12, "{lr}");
    }

    #[test]
    fn cosine_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let lr = cosine_lr(0.5, 1e-4, t, 50);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn sgd_momentum_first_step_is_plain_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9), 0.1, 0.1, 10, 0.0);
        let mut params = vec![Param::new("w", vec![1.0f64, 2.0], vec![2])];
        let grads = vec![vec![0.5f64, -1.0]];
        opt.step(&mut params, &grads, 0).unwrap();
        assert!((params[0].data[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert!((params[0].data[1] - (2.0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, 0.1, 10, 0.0);
        let mut params = vec![Param::new("w", vec![4.0f64], vec![1])];
        for _ in 0..200 {
            // d/dw (w - 1)^2 = 2 (w - 1)
            let g = 2.0 * (params[0].data[0] - 1.0);
            opt.step(&mut params, &[vec![g]], 0).unwrap();
        }
        assert!((params[0].data[0] - 1.0).abs() < 0.05);
    }
}
