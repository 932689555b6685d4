//! Multiply-accumulate accounting for dense and gated execution.
//!
//! Closed forms, with `d = d_model`, `f = d_ffn`, `k = cgmlp_kernel` and
//! `Te` the number of positions a module actually runs on:
//!
//! | module            | MACs                                        |
//! |-------------------|---------------------------------------------|
//! | self-attention    | `4·Te·d² + 2·Te²·d`                          |
//! | source attention  | `2·Te·d² + 2·S·d² + 2·Te·S·d` (`S` source frames; 0 when `Te = 0`) |
//! | FFN               | `2·Te·d·f`                                  |
//! | cgMLP             | `T·(2·d·f + f·k + f·d)`, full `T` whenever it runs |
//! | branch merge      | `T·2d·d` (not prunable)                     |
//! | output projection | `L·d·vocab` (not prunable)                  |
//! | frontend          | `T·F·d`, reported separately                |
//!
//! Softmax, layer norm, activations, biases and residual additions are not
//! counted. GFLOPs are `2·MACs/1e9`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::gates::{GateSet, ModuleGate};
use crate::model::{ModelConfig, ModuleKind, PrunableModuleSpec, Stage};

pub const FLOPS_SCHEMA_VERSION: u32 = 1;
pub const FLOPS_CONVENTION: &str =
    "multiply-accumulates of matmuls and convolutions; softmax, layer norm, activations, biases and residuals excluded; gflops = 2*macs/1e9";

/// Sequence lengths of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    /// Encoder frames `T`.
    pub frames: usize,
    /// Decoder tokens `L`.
    pub tokens: usize,
}

/// MACs of one module running on `t_effective` positions.
pub fn count_flops_module(
    spec: &PrunableModuleSpec,
    t_effective: usize,
    extents: Extents,
    cfg: &ModelConfig,
) -> u64 {
    let te = t_effective as u64;
    let d = cfg.d_model as u64;
    let f = cfg.d_ffn as u64;
    if te == 0 {
        return 0;
    }
    match spec.kind {
        ModuleKind::EncSelfAttn | ModuleKind::DecSelfAttn => 4 * te * d * d + 2 * te * te * d,
        ModuleKind::EncFfn | ModuleKind::DecFfn => 2 * te * d * f,
        ModuleKind::EncCgMlp => {
            let t = extents.frames as u64;
            t * (2 * d * f + f * cfg.cgmlp_kernel as u64 + f * d)
        }
        ModuleKind::DecSrcAttn => {
            let s = extents.frames as u64;
            2 * te * d * d + 2 * s * d * d + 2 * te * s * d
        }
    }
}

/// Parses a `(stage, module name)` pair and counts it.
pub fn count_flops_named(
    stage: &str,
    module: &str,
    layer: usize,
    t_effective: usize,
    extents: Extents,
    cfg: &ModelConfig,
) -> Result<u64> {
    let stage: Stage = stage.parse()?;
    let kind = ModuleKind::parse(stage, module)
        .map_err(|_| Error::Contract(format!("unknown module kind {}.{module}", stage.name())))?;
    Ok(count_flops_module(
        &PrunableModuleSpec::new(kind, layer),
        t_effective,
        extents,
        cfg,
    ))
}

/// Shape of one raw context stream entering a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamShape {
    pub rows: usize,
    pub dim: usize,
}

/// Which gate predictor produced the gates, for overhead accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PredictorCost {
    None,
    /// Streams of each gated stage (decoder streams already time-pooled).
    Local {
        encoder: Option<Vec<StreamShape>>,
        decoder: Option<Vec<StreamShape>>,
    },
    Global {
        context_embed_dim: usize,
        modules: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFlops {
    pub stage: Stage,
    pub layer: usize,
    pub module_kind: String,
    pub effective_positions: usize,
    pub dense_macs: u64,
    pub pruned_macs: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub dense_total: u64,
    pub pruned_total: u64,
    pub gate_overhead: u64,
    pub context_overhead: u64,
}

impl StageFlops {
    pub fn reduction(&self) -> i64 {
        self.dense_total as i64
            - (self.pruned_total + self.gate_overhead + self.context_overhead) as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub schema_version: u32,
    pub convention: String,
    pub mode: ExecMode,
    pub extents: Extents,
    pub frontend: u64,
    pub modules: Vec<ModuleFlops>,
    pub encoder: StageFlops,
    pub decoder: StageFlops,
    pub dense_total: u64,
    pub pruned_total: u64,
    pub gate_overhead: u64,
    pub context_overhead: u64,
    pub reduction: i64,
    pub encoder_gflops_dense: f64,
    pub encoder_gflops_pruned: f64,
}

impl FlopsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != FLOPS_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported flops schema version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Adds up utterance reports; totals and per-module counts are summed.
    pub fn accumulate(reports: &[FlopsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Usage("no reports to accumulate".into()))?;
        let mut out = first.clone();
        for r in &reports[1..] {
            if r.modules.len() != out.modules.len() {
                return Err(Error::Contract(
                    "reports cover different module sets".into(),
                ));
            }
            out.extents.frames += r.extents.frames;
            out.extents.tokens += r.extents.tokens;
            out.frontend += r.frontend;
            for (a, b) in out.modules.iter_mut().zip(&r.modules) {
                a.effective_positions += b.effective_positions;
                a.dense_macs += b.dense_macs;
                a.pruned_macs += b.pruned_macs;
            }
            for (a, b) in [
                (&mut out.encoder, &r.encoder),
                (&mut out.decoder, &r.decoder),
            ] {
                a.dense_total += b.dense_total;
                a.pruned_total += b.pruned_total;
                a.gate_overhead += b.gate_overhead;
                a.context_overhead += b.context_overhead;
            }
        }
        out.finish();
        Ok(out)
    }

    fn finish(&mut self) {
        self.dense_total = self.encoder.dense_total + self.decoder.dense_total;
        self.pruned_total = self.encoder.pruned_total + self.decoder.pruned_total;
        self.gate_overhead = self.encoder.gate_overhead + self.decoder.gate_overhead;
        self.context_overhead = self.encoder.context_overhead + self.decoder.context_overhead;
        self.reduction = self.encoder.reduction() + self.decoder.reduction();
        self.encoder_gflops_dense = gflops(self.encoder.dense_total);
        self.encoder_gflops_pruned = gflops(self.encoder.pruned_total);
    }
}

pub fn gflops(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e9
}

fn effective(gate: Option<&ModuleGate>, mode: ExecMode, positions: usize) -> Result<usize> {
    let Some(g) = gate else { return Ok(positions) };
    match mode {
        ExecMode::Dense => Ok(positions),
        ExecMode::Temporal => {
            if g.positions() != positions {
                return Err(Error::Contract(format!(
                    "{} gate has {} positions, expected {positions}",
                    g.spec.kind,
                    g.positions()
                )));
            }
            Ok(g.kept())
        }
        ExecMode::Utterance => {
            if g.positions() != 1 {
                return Err(Error::Contract(format!(
                    "{} utterance gate must have one slot",
                    g.spec.kind
                )));
            }
            Ok(if g.decisions[0] { positions } else { 0 })
        }
    }
}

fn predictor_costs(
    layers: usize,
    positions: usize,
    streams: &[StreamShape],
    cfg: &ModelConfig,
) -> (u64, u64) {
    let d = cfg.context_dim as u64;
    let p = positions as u64;
    let d0 = streams.len() as u64;
    let context = streams
        .iter()
        .map(|s| (s.rows * s.dim) as u64 * d)
        .sum::<u64>()
        + d0 * p * d * d;
    let gate = (0..layers as u64)
        .map(|i| 2 * p * (d0 + i) * d + 3 * p * d * 2 + p * d * d)
        .sum();
    (gate, context)
}

/// Full report for one utterance under `gates`. Stages without gates count
/// as dense.
pub fn count_flops_model(
    gates: &GateSet,
    cfg: &ModelConfig,
    mode: ExecMode,
    extents: Extents,
    predictor: &PredictorCost,
) -> Result<FlopsReport> {
    let d = cfg.d_model as u64;
    let t = extents.frames;
    let l = extents.tokens;
    let mut modules = Vec::new();
    let mut enc = StageFlops::default();
    let mut dec = StageFlops::default();
    for (stage, n_layers, positions) in [
        (Stage::Encoder, cfg.n_enc_layers, t),
        (Stage::Decoder, cfg.n_dec_layers, l),
    ] {
        let layers = gates.stage(stage);
        if !layers.is_empty() && layers.len() != n_layers {
            return Err(Error::Contract(format!(
                "gate set has {} {} layers, model has {n_layers}",
                layers.len(),
                stage.name()
            )));
        }
        let totals = if stage == Stage::Encoder {
            &mut enc
        } else {
            &mut dec
        };
        for layer in 0..n_layers {
            for kind in stage.kinds() {
                let spec = PrunableModuleSpec::new(kind, layer);
                let gate = layers
                    .get(layer)
                    .and_then(|g| g.iter().find(|g| g.spec.kind == kind));
                if !layers.is_empty() && gate.is_none() {
                    return Err(Error::Contract(format!(
                        "missing gate for {kind} layer {layer}"
                    )));
                }
                let te = effective(gate, mode, positions)?;
                let dense_macs = count_flops_module(&spec, positions, extents, cfg);
                let pruned_macs = count_flops_module(&spec, te, extents, cfg);
                totals.dense_total += dense_macs;
                totals.pruned_total += pruned_macs;
                modules.push(ModuleFlops {
                    stage,
                    layer,
                    module_kind: kind.name().to_string(),
                    effective_positions: te,
                    dense_macs,
                    pruned_macs,
                });
            }
            if stage == Stage::Encoder {
                let merge = t as u64 * 2 * d * d;
                totals.dense_total += merge;
                totals.pruned_total += merge;
            }
        }
    }
    let output = l as u64 * d * cfg.vocab_size as u64;
    dec.dense_total += output;
    dec.pruned_total += output;

    match predictor {
        PredictorCost::None => {}
        PredictorCost::Local { encoder, decoder } => {
            if let Some(s) = encoder {
                (enc.gate_overhead, enc.context_overhead) =
                    predictor_costs(cfg.n_enc_layers, t, s, cfg);
            }
            if let Some(s) = decoder {
                (dec.gate_overhead, dec.context_overhead) =
                    predictor_costs(cfg.n_dec_layers, l, s, cfg);
            }
        }
        PredictorCost::Global {
            context_embed_dim,
            modules: m,
        } => {
            let h = cfg.global_hidden as u64;
            enc.gate_overhead = (d + *context_embed_dim as u64) * h + h * 2 * *m as u64;
        }
    }

    let mut report = FlopsReport {
        schema_version: FLOPS_SCHEMA_VERSION,
        convention: FLOPS_CONVENTION.to_string(),
        mode,
        extents,
        frontend: (t * cfg.feature_dim) as u64 * d,
        modules,
        encoder: enc,
        decoder: dec,
        dense_total: 0,
        pruned_total: 0,
        gate_overhead: 0,
        context_overhead: 0,
        reduction: 0,
        encoder_gflops_dense: 0.0,
        encoder_gflops_pruned: 0.0,
    };
    report.finish();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            n_heads: 2,
            d_ffn: 8,
            context_dim: 4,
            ..Default::default()
        }
    }

    fn ext(frames: usize, tokens: usize) -> Extents {
        Extents { frames, tokens }
    }

    #[test]
    fn ffn_hand_value() {
        let spec = PrunableModuleSpec::new(ModuleKind::EncFfn, 0);
        assert_eq!(count_flops_module(&spec, 2, ext(5, 0), &cfg()), 128);
    }

    #[test]
    fn zero_positions_cost_nothing() {
        for kind in ModuleKind::ENCODER.into_iter().chain(ModuleKind::DECODER) {
            assert_eq!(
                count_flops_module(&PrunableModuleSpec::new(kind, 0), 0, ext(7, 3), &cfg()),
                0
            );
        }
    }

    #[test]
    fn cgmlp_uses_full_length() {
        let spec = PrunableModuleSpec::new(ModuleKind::EncCgMlp, 0);
        let c = cfg();
        assert_eq!(
            count_flops_module(&spec, 1, ext(6, 0), &c),
            count_flops_module(&spec, 6, ext(6, 0), &c)
        );
        assert_eq!(
            count_flops_module(&spec, 6, ext(6, 0), &c),
            6 * (2 * 4 * 8 + 8 * 3 + 8 * 4)
        );
    }

    #[test]
    fn keep_all_equals_dense() {
        let c = cfg();
        let e = ext(9, 4);
        let dense = count_flops_model(
            &GateSet::new(ExecMode::Dense),
            &c,
            ExecMode::Dense,
            e,
            &PredictorCost::None,
        )
        .unwrap();
        assert_eq!(dense.reduction, 0);
        let temporal = GateSet::uniform(
            ExecMode::Temporal,
            (c.n_enc_layers, 9),
            (c.n_dec_layers, 4),
            true,
        );
        let r =
            count_flops_model(&temporal, &c, ExecMode::Temporal, e, &PredictorCost::None).unwrap();
        assert_eq!(r.pruned_total, dense.dense_total);
        assert_eq!(r.dense_total, dense.dense_total);
    }

    #[test]
    fn unknown_kind_is_contract_error() {
        assert!(count_flops_named("encoder", "src_attn", 0, 3, ext(3, 0), &cfg()).is_err());
        assert_eq!(
            count_flops_named("encoder", "ffn", 0, 2, ext(3, 0), &cfg()).unwrap(),
            128
        );
    }

    #[test]
    fn json_round_trip() {
        let c = cfg();
        let r = count_flops_model(
            &GateSet::new(ExecMode::Dense),
            &c,
            ExecMode::Dense,
            ext(3, 2),
            &PredictorCost::None,
        )
        .unwrap();
        assert_eq!(FlopsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
