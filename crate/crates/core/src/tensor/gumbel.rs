//! Straight-through Gumbel-softmax over a trailing two-class axis.

use super::{RngState, Tensor};
use crate::error::{Error, Result};

const U_MIN: f64 = 1e-12;

/// Gumbel(0, 1) noise, `-ln(-ln(u))` with `u` clamped to `[1e-12, 1-1e-12]`.
pub fn gumbel_noise(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = rng.uniform().clamp(U_MIN, 1.0 - U_MIN);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Draws Gumbel noise and applies [`gumbel_softmax_st_with_noise`].
pub fn gumbel_softmax_st(
    logits: &Tensor,
    temperature: f64,
    rng: &mut RngState,
    hard: bool,
) -> Result<Tensor> {
    let noise = gumbel_noise(rng, logits.numel());
    gumbel_softmax_st_with_noise(logits, &noise, temperature, hard)
}

/// `softmax((logits + noise) / temperature)` over the last axis (which must
/// have size 2). With `hard`, the forward value is the one-hot argmax while
/// the gradient is that of the soft sample.
pub fn gumbel_softmax_st_with_noise(
    logits: &Tensor,
    noise: &[f64],
    temperature: f64,
    hard: bool,
) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = logits.shape();
    if shape.last() != Some(&2) {
        return Err(Error::Dimension {
            op: "gumbel_softmax_st",
            lhs: shape.to_vec(),
            rhs: vec![2],
        });
    }
    if noise.len() != logits.numel() {
        return Err(Error::Dimension {
            op: "gumbel_softmax_st",
            lhs: shape.to_vec(),
            rhs: vec![noise.len()],
        });
    }
    let rank = shape.len();
    let noise = Tensor::new(shape, noise.to_vec())?;
    let soft = logits
        .add(&noise)?
        .scale(1.0 / temperature)
        .softmax(rank - 1)?;
    if !hard {
        return Ok(soft);
    }
    let hard_values: Vec<f64> = soft
        .data()
        .chunks(2)
        .flat_map(|p| if p[0] >= p[1] { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    Ok(Tensor::straight_through(hard_values, &soft))
}
