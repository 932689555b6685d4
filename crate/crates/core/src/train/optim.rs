//! Adam with a warmup learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup to `peak` over `warmup` steps, then `peak·sqrt(warmup/step)`.
/// Steps count from 1.
pub fn warmup_lr(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak;
    }
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Linear anneal from `start` to `end` over `steps`, constant afterwards.
pub fn anneal(step: usize, start: f64, end: f64, steps: usize) -> f64 {
    if steps == 0 {
        return end;
    }
    let frac = (step as f64 / steps as f64).min(1.0);
    start + (end - start) * frac
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: Vec<Tensor>) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            params,
            m,
            v,
            t: 0,
        }
    }

    /// Global L2 norm of the current gradients (missing grads count as zero).
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(Tensor::grad)
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update with gradients scaled so their global norm is at
    /// most `clip`, then clears the gradients. Returns the pre-clip norm.
    pub fn step(&mut self, lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = self.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            p.update_data(|d| {
                for i in 0..d.len() {
                    let gi = g[i] * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    d[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
            });
            p.zero_grad();
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert!((warmup_lr(100, 1e-3, 100) - 1e-3).abs() < 1e-15);
        assert!((warmup_lr(50, 1e-3, 100) - 5e-4).abs() < 1e-15);
        assert!((warmup_lr(400, 1e-3, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn anneal_is_monotone() {
        let v: Vec<f64> = (0..20).map(|s| anneal(s, 1.0, 0.5, 10)).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(v[15], 0.5);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let x = Tensor::param(&[2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(vec![x.clone()]);
        for _ in 0..500 {
            x.mul(&x).unwrap().sum().backward().unwrap();
            opt.step(0.05, None).unwrap();
        }
        assert!(x.to_vec().iter().all(|v| v.abs() < 1e-2));
        assert!(x.grad().is_none());
    }
}
