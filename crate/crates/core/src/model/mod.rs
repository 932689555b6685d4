//! Toy encoder-decoder with individually prunable modules.
//!
//! Encoder layer (E-Branchformer-lite):
//!
//! ```text
//! x = x + merge([z_att · SelfAttn(LN x) ‖ z_cg · CgMlp(LN x)])
//! x = x + z_ffn · FFN(LN x)
//! ```
//!
//! Decoder layer: causal self-attention, source attention over the encoder
//! output, then FFN, each pre-norm with a gated residual branch.

pub mod config;
pub mod layers;
pub mod params;
pub mod spec;

pub use config::ModelConfig;
pub use spec::{ModuleKind, PrunableModuleSpec, Stage};

use layers::{
    sinusoidal_positions, CgMlp, FeedForward, LayerNorm, Linear, SelfAttention, SourceAttention,
};
use params::{ParamBuilder, ParamSource, ParamStore};

use crate::error::{Error, Result};
use crate::exec::{apply_gated, ExecMode};
use crate::gates::{GateSet, Gating, ModuleGate};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: SelfAttention,
    pub cgmlp: CgMlp,
    /// Bias-free `2d → d` projection of the concatenated branches.
    pub merge: Linear,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut s = pb.scope(name);
        let d = cfg.d_model;
        Ok(Self {
            self_attn: SelfAttention::new(&mut s, "self_attn", d, cfg.n_heads, false)?,
            cgmlp: CgMlp::new(&mut s, "cgmlp", d, cfg.d_ffn, cfg.cgmlp_kernel)?,
            merge: Linear::new(&mut s, "merge", 2 * d, d, false)?,
            ffn: FeedForward::new(&mut s, "ffn", d, cfg.d_ffn)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        gates: Option<&[ModuleGate]>,
        mode: ExecMode,
    ) -> Result<Tensor> {
        let gate = |n: usize| gates.map(|g| &g[n]);
        let att = apply_gated(mode, gate(0), x, true, |h| self.self_attn.forward(h))?;
        let cg = apply_gated(mode, gate(1), x, false, |h| self.cgmlp.forward(h))?;
        let x = x.add(&self.merge.forward(&Tensor::concat_cols(&[att, cg])?)?)?;
        let ff = apply_gated(mode, gate(2), &x, true, |h| self.ffn.forward(h))?;
        x.add(&ff)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub src_attn: SourceAttention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut s = pb.scope(name);
        let d = cfg.d_model;
        Ok(Self {
            self_attn: SelfAttention::new(&mut s, "self_attn", d, cfg.n_heads, true)?,
            src_attn: SourceAttention::new(&mut s, "src_attn", d, cfg.n_heads)?,
            ffn: FeedForward::new(&mut s, "ffn", d, cfg.d_ffn)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        gates: Option<&[ModuleGate]>,
        mode: ExecMode,
    ) -> Result<Tensor> {
        let gate = |n: usize| gates.map(|g| &g[n]);
        let x = x.add(&apply_gated(mode, gate(0), x, true, |h| {
            self.self_attn.forward(h)
        })?)?;
        let x = x.add(&apply_gated(mode, gate(1), &x, true, |h| {
            self.src_attn.forward(h, memory)
        })?)?;
        x.add(&apply_gated(mode, gate(2), &x, true, |h| {
            self.ffn.forward(h)
        })?)
    }
}

/// Layer boundaries `x^0 … x^L` of one stack and the gates that were applied.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub layers: Vec<Tensor>,
    pub gates: Vec<Vec<ModuleGate>>,
}

impl LayerActivations {
    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("at least the input boundary")
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub logits: Tensor,
    pub gates: Vec<Vec<ModuleGate>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub frontend: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub embed: Tensor,
    pub decoder: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

impl Model {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = pb.scope("model");
        let d = cfg.d_model;
        let frontend = Linear::new(&mut s, "frontend", cfg.feature_dim, d, true)?;
        let encoder = (0..cfg.n_enc_layers)
            .map(|l| EncoderLayer::new(&mut s, &format!("enc{l}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let embed = s.normal("embed", &[cfg.vocab_size, d], 1.0)?;
        let decoder = (0..cfg.n_dec_layers)
            .map(|l| DecoderLayer::new(&mut s, &format!("dec{l}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut s, "final_norm", d)?;
        let output = Linear::new(&mut s, "output", d, cfg.vocab_size, true)?;
        Ok(Self {
            config: cfg.clone(),
            frontend,
            encoder,
            embed,
            decoder,
            final_norm,
            output,
        })
    }

    /// Builds a model with its own parameter store.
    pub fn build(cfg: &ModelConfig, mut source: ParamSource) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::default();
        let model = Self::new(&mut ParamBuilder::new(&mut store, &mut source), cfg)?;
        Ok((model, store))
    }

    /// Feature projection plus sinusoidal positions (`x^0`).
    pub fn frontend_forward(&self, features: &Tensor) -> Result<Tensor> {
        let (t, f) = features.dims2()?;
        if f != self.config.feature_dim {
            return Err(Error::Dimension {
                op: "frontend",
                lhs: vec![t, f],
                rhs: vec![t, self.config.feature_dim],
            });
        }
        if t == 0 || t > self.config.max_frames {
            return Err(Error::Contract(format!(
                "{t} frames outside 1..={}",
                self.config.max_frames
            )));
        }
        self.frontend
            .forward(features)?
            .add(&sinusoidal_positions(t, self.config.d_model))
    }

    pub fn encoder_forward(
        &self,
        features: &Tensor,
        gating: &mut dyn Gating,
        mode: ExecMode,
    ) -> Result<LayerActivations> {
        let mut x = self.frontend_forward(features)?;
        let mut layers = vec![x.clone()];
        let mut gates = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            let g = gating.layer_gates(Stage::Encoder, i, &x)?;
            x = layer.forward(&x, g.as_deref(), mode)?;
            layers.push(x.clone());
            gates.extend(g);
        }
        Ok(LayerActivations { layers, gates })
    }

    /// Next-token logits for every position of `tokens` (teacher forcing).
    pub fn decoder_forward(
        &self,
        tokens: &[usize],
        enc_out: &Tensor,
        gating: &mut dyn Gating,
        mode: ExecMode,
    ) -> Result<DecoderOutput> {
        if tokens.is_empty() {
            return Err(Error::Contract(
                "decoder needs at least one input token".into(),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Parameter(format!("token {bad} outside vocabulary")));
        }
        let mut x = Tensor::embed(&self.embed, tokens)?
            .add(&sinusoidal_positions(tokens.len(), self.config.d_model))?;
        let mut gates = Vec::new();
        for (i, layer) in self.decoder.iter().enumerate() {
            let g = gating.layer_gates(Stage::Decoder, i, &x)?;
            x = layer.forward(&x, enc_out, g.as_deref(), mode)?;
            gates.extend(g);
        }
        let logits = self.output.forward(&self.final_norm.forward(&x)?)?;
        Ok(DecoderOutput { logits, gates })
    }

    /// Greedy decoding from `prefix` until `eos` or `max_len` generated tokens.
    /// Returns the generated tokens (without the prefix or `eos`).
    pub fn greedy_decode(
        &self,
        enc_out: &Tensor,
        prefix: &[usize],
        eos: usize,
        max_len: usize,
        gating: &mut dyn Gating,
        mode: ExecMode,
    ) -> Result<Vec<usize>> {
        let mut tokens = prefix.to_vec();
        for _ in 0..max_len {
            let out = self.decoder_forward(&tokens, enc_out, gating, mode)?;
            let (rows, vocab) = out.logits.dims2()?;
            let data = out.logits.data();
            let last = &data[(rows - 1) * vocab..rows * vocab];
            let next = argmax(last);
            if next == eos {
                break;
            }
            tokens.push(next);
        }
        Ok(tokens[prefix.len()..].to_vec())
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Collects the gates of both stacks into a [`GateSet`].
pub fn gate_set(
    mode: ExecMode,
    encoder: &LayerActivations,
    decoder: Option<&DecoderOutput>,
) -> GateSet {
    GateSet {
        granularity: mode,
        encoder: encoder.gates.clone(),
        decoder: decoder.map(|d| d.gates.clone()).unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{FixedGates, NoGating};
    use crate::tensor::RngState;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 12,
            vocab_size: 10,
            feature_dim: 4,
            context_dim: 8,
            n_languages: 2,
            ..Default::default()
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::new(
            &[t, f],
            (0..t * f).map(|_| rng.uniform() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn keep_all_matches_dense() {
        let cfg = small();
        let (model, _) = Model::build(&cfg, ParamSource::Random(RngState::new(3))).unwrap();
        let x = features(6, 4, 1);
        let dense = model
            .encoder_forward(&x, &mut NoGating, ExecMode::Dense)
            .unwrap();
        for mode in [ExecMode::Temporal, ExecMode::Utterance] {
            let p = if mode == ExecMode::Temporal { 6 } else { 1 };
            let set = GateSet::uniform(mode, (2, p), (0, 0), true);
            let out = model
                .encoder_forward(&x, &mut FixedGates(&set), mode)
                .unwrap();
            assert!(out.output().max_abs_diff(dense.output()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn all_pruned_utterance_is_frontend() {
        let cfg = small();
        let (model, _) = Model::build(&cfg, ParamSource::Random(RngState::new(3))).unwrap();
        let x = features(5, 4, 2);
        let set = GateSet::uniform(ExecMode::Utterance, (2, 1), (0, 0), false);
        let out = model
            .encoder_forward(&x, &mut FixedGates(&set), ExecMode::Utterance)
            .unwrap();
        let x0 = model.frontend_forward(&x).unwrap();
        assert_eq!(out.output().to_vec(), x0.to_vec());
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = small();
        let (model, _) = Model::build(&cfg, ParamSource::Random(RngState::new(5))).unwrap();
        let enc = model
            .encoder_forward(&features(4, 4, 3), &mut NoGating, ExecMode::Dense)
            .unwrap();
        let a = model
            .decoder_forward(&[1, 4, 5, 6], enc.output(), &mut NoGating, ExecMode::Dense)
            .unwrap();
        let b = model
            .decoder_forward(&[1, 4, 9, 6], enc.output(), &mut NoGating, ExecMode::Dense)
            .unwrap();
        let v = cfg.vocab_size;
        assert_eq!(a.logits.to_vec()[..2 * v], b.logits.to_vec()[..2 * v]);
        assert_ne!(
            a.logits.to_vec()[2 * v..3 * v],
            b.logits.to_vec()[2 * v..3 * v]
        );
    }

    #[test]
    fn too_many_frames_rejected() {
        let cfg = ModelConfig {
            max_frames: 3,
            ..small()
        };
        let (model, _) = Model::build(&cfg, ParamSource::Random(RngState::new(0))).unwrap();
        assert!(matches!(
            model.encoder_forward(&features(4, 4, 0), &mut NoGating, ExecMode::Dense),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
