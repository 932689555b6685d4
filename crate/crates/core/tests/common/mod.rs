#![allow(dead_code)]

use ctxgate_core::tensor::no_grad;
use ctxgate_core::{ModelConfig, RngState, Tensor};

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

pub fn uniform(rng: &mut RngState, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub fn values(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect()
}

pub fn param(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, values(rng, n)).unwrap()
}

pub fn constant(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, values(rng, n)).unwrap()
}

/// `sum(y ⊙ w)` for a fixed random `w`, turning any output into a scalar
/// whose gradient exercises every output entry.
pub fn project(y: &Tensor, seed: u64) -> Tensor {
    let mut rng = RngState::new(seed);
    let w = constant(&mut rng, y.shape());
    y.mul(&w).unwrap().sum()
}

/// Worst relative error between the analytic gradient of `f` and central
/// differences, over every entry of every tensor in `inputs`.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn() -> Tensor) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    f().backward().unwrap();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut worst: f64 = 0.0;
    for (t, grad) in inputs.iter().zip(&analytic) {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.update_data(|d| d[i] = orig + H);
            let up = no_grad(|| f().item());
            t.update_data(|d| d[i] = orig - H);
            let down = no_grad(|| f().item());
            t.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * H);
            let denom = grad[i].abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    worst
}

/// Five small shapes drawn from `seed`, each dimension in `1..=max`.
pub fn shapes(seed: u64, max: usize) -> Vec<(usize, usize)> {
    let mut rng = RngState::new(seed);
    let mut out = vec![(1, 1)];
    while out.len() < 5 {
        let m = 1 + (rng.uniform() * max as f64) as usize;
        let n = 1 + (rng.uniform() * max as f64) as usize;
        out.push((m.min(max), n.min(max)));
    }
    out
}

/// A model small enough for finite differences over every parameter.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 1,
        d_ffn: 12,
        cgmlp_kernel: 3,
        vocab_size: 12,
        max_frames: 40,
        feature_dim: 4,
        context_dim: 8,
        global_hidden: 8,
        speaker_dim: 6,
        event_dim: 5,
        lang_dim: 4,
        ..ModelConfig::default()
    }
}

pub mod grad;
