use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and gating hyper-parameters of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub cgmlp_kernel: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    /// Fraction of gates that should stay active (0.7 = 30% sparsity).
    pub target_keep_ratio: f64,
    pub gate_temperature: f64,
    pub gate_threshold: f64,
    /// Width of the gate predictor's context memory; must equal `d_model`.
    pub context_dim: usize,
    /// Divide gate-predictor attention scores by `sqrt(context_dim)`.
    pub scaled_gate_attention: bool,
    pub global_hidden: usize,
    pub n_languages: usize,
    pub speaker_dim: usize,
    pub event_dim: usize,
    pub lang_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 2,
            d_ffn: 128,
            cgmlp_kernel: 3,
            vocab_size: 32,
            max_frames: 64,
            feature_dim: 16,
            target_keep_ratio: 0.7,
            gate_temperature: 1.0,
            gate_threshold: 0.5,
            context_dim: 64,
            scaled_gate_attention: false,
            global_hidden: 64,
            n_languages: 3,
            speaker_dim: 32,
            event_dim: 24,
            lang_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.cgmlp_kernel == 0 || self.cgmlp_kernel.is_multiple_of(2) {
            return fail(format!(
                "cgmlp_kernel must be odd and >= 1, got {}",
                self.cgmlp_kernel
            ));
        }
        if !(self.target_keep_ratio > 0.0 && self.target_keep_ratio <= 1.0) {
            return fail(format!(
                "target_keep_ratio {} outside (0, 1]",
                self.target_keep_ratio
            ));
        }
        if !(self.gate_temperature > 0.0) {
            return fail(format!(
                "gate_temperature {} must be positive",
                self.gate_temperature
            ));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return fail(format!(
                "gate_threshold {} outside (0, 1)",
                self.gate_threshold
            ));
        }
        if self.context_dim != self.d_model {
            return fail(format!(
                "context_dim {} must equal d_model {} (layer inputs join the context memory)",
                self.context_dim, self.d_model
            ));
        }
        if self.vocab_size <= self.n_languages + 1 {
            return fail("vocabulary too small for special tokens".into());
        }
        if self.n_enc_layers == 0 {
            return fail("need at least one encoder layer".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
