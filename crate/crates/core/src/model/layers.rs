//! Building blocks shared by the encoder and decoder stacks.

use super::params::ParamBuilder;
use crate::error::Result;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let weight = s.normal("weight", &[d_in, d_out], (1.0 / d_in as f64).sqrt())?;
        let bias = if bias {
            Some(s.zeros("bias", &[d_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Linear layer with explicit initial values (used for gate heads).
    pub fn with_values(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let weight = s.constant("weight", &[d_in, d_out], weight)?;
        let bias = Some(s.constant("bias", &[d_out], bias)?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            gamma: s.ones("gamma", &[d])?,
            beta: s.zeros("beta", &[d])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

/// Upper-triangular `-1e9` mask so row `i` only sees columns `<= i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = -1e9;
        }
    }
    Tensor::new(&[n, n], m).expect("square mask")
}

/// Sinusoidal position table, `rows × d`.
pub fn sinusoidal_positions(rows: usize, d: usize) -> Tensor {
    let mut p = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * k / d as f64);
            p[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[rows, d], p).expect("position table")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", d, d, true)?,
            k: Linear::new(&mut s, "k", d, d, true)?,
            v: Linear::new(&mut s, "v", d, d, true)?,
            o: Linear::new(&mut s, "o", d, d, true)?,
            heads,
        })
    }

    /// Scaled dot-product attention of `query` rows over `memory` rows.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, causal: bool) -> Result<Tensor> {
        let q = self.q.forward(query)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        let d = q.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = causal.then(|| causal_mask(query.shape()[0]));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow_cols(h * dh, dh)?;
            let kh = k.narrow_cols(h * dh, dh)?;
            let vh = v.narrow_cols(h * dh, dh)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            outs.push(scores.softmax(1)?.matmul(&vh)?);
        }
        let cat = if outs.len() == 1 {
            outs.pop().expect("one head")
        } else {
            Tensor::concat_cols(&outs)?
        };
        self.o.forward(&cat)
    }
}

/// Pre-norm self-attention module body (no residual).
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", d)?,
            attn: MultiHeadAttention::new(&mut s, "attn", d, heads)?,
            causal,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        self.attn.forward(&h, &h, self.causal)
    }
}

/// Pre-norm cross-attention over encoder output (no residual).
#[derive(Debug, Clone)]
pub struct SourceAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl SourceAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", d)?,
            attn: MultiHeadAttention::new(&mut s, "attn", d, heads)?,
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        self.attn.forward(&h, memory, false)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, d_ffn: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", d)?,
            up: Linear::new(&mut s, "up", d, d_ffn, true)?,
            down: Linear::new(&mut s, "down", d_ffn, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down
            .forward(&self.up.forward(&self.norm.forward(x)?)?.gelu())
    }
}

/// MLP with convolutional gating: up-project to `2·d_ffn`, split, run a
/// depthwise conv over frames on the gate half, multiply, down-project.
#[derive(Debug, Clone)]
pub struct CgMlp {
    pub norm: LayerNorm,
    pub up: Linear,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub down: Linear,
    pub d_ffn: usize,
}

impl CgMlp {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d: usize,
        d_ffn: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let norm = LayerNorm::new(&mut s, "norm", d)?;
        let up = Linear::new(&mut s, "up", d, 2 * d_ffn, true)?;
        // Delta kernel: the conv starts as identity on the gate half.
        let mut w = vec![0.0; kernel * d_ffn];
        let centre = (kernel - 1) / 2;
        w[centre * d_ffn..(centre + 1) * d_ffn].fill(1.0);
        let conv_weight = s.constant("conv.weight", &[kernel, d_ffn], w)?;
        let conv_bias = s.zeros("conv.bias", &[d_ffn])?;
        let down = Linear::new(&mut s, "down", d_ffn, d, true)?;
        Ok(Self {
            norm,
            up,
            conv_weight,
            conv_bias,
            down,
            d_ffn,
        })
    }

    pub fn kernel(&self) -> usize {
        self.conv_weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(&self.norm.forward(x)?)?.gelu();
        let value = h.narrow_cols(0, self.d_ffn)?;
        let gate = h
            .narrow_cols(self.d_ffn, self.d_ffn)?
            .conv1d_depthwise(&self.conv_weight, &self.conv_bias)?;
        self.down.forward(&value.mul(&gate)?)
    }
}
