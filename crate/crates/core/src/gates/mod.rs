//! Gate decisions and the predictors that produce them.

mod global;
mod local;

pub use global::{GlobalGatePredictor, CONTEXT_EMBED_DIM};
pub use local::{
    context_attention, local_gate_forward, GateMode, GatePredictorState, LocalGatePredictor,
    LocalGating, LocalLayerHeads, KEEP_BIAS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{ModuleKind, PrunableModuleSpec, Stage};
use crate::tensor::{gumbel_softmax_st, RngState, Tensor};

/// Keep/prune decisions for one module over its positions (frames, tokens,
/// or a single utterance slot).
#[derive(Debug, Clone)]
pub struct ModuleGate {
    pub spec: PrunableModuleSpec,
    /// Keep-class probability before thresholding.
    pub probabilities: Vec<f64>,
    pub decisions: Vec<bool>,
    /// Differentiable `P×1` keep values equal to `decisions` (training only).
    pub mask: Option<Tensor>,
    /// Differentiable `P×1` keep probabilities (training only).
    pub keep_prob: Option<Tensor>,
}

impl ModuleGate {
    pub fn constant(spec: PrunableModuleSpec, decisions: Vec<bool>) -> Self {
        let probabilities = decisions
            .iter()
            .map(|&d| if d { 1.0 } else { 0.0 })
            .collect();
        Self {
            spec,
            probabilities,
            decisions,
            mask: None,
            keep_prob: None,
        }
    }

    pub fn positions(&self) -> usize {
        self.decisions.len()
    }

    pub fn kept(&self) -> usize {
        self.decisions.iter().filter(|&&d| d).count()
    }

    /// Turns `P×2` logits into a gate: hard straight-through Gumbel sample
    /// when `training`, thresholded softmax otherwise.
    pub fn from_logits(
        spec: PrunableModuleSpec,
        logits: &Tensor,
        training: bool,
        temperature: f64,
        threshold: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        let probs = logits.softmax(1)?;
        let keep_prob = probs.narrow_cols(0, 1)?;
        let probabilities = keep_prob.to_vec();
        if training {
            let sample = gumbel_softmax_st(logits, temperature, rng, true)?;
            let mask = sample.narrow_cols(0, 1)?;
            let decisions = mask.data().iter().map(|&v| v == 1.0).collect();
            Ok(Self {
                spec,
                probabilities,
                decisions,
                mask: Some(mask),
                keep_prob: Some(keep_prob),
            })
        } else {
            let decisions = binarize_inference(&probabilities, threshold);
            Ok(Self {
                spec,
                probabilities,
                decisions,
                mask: None,
                keep_prob: None,
            })
        }
    }
}

/// `p >= threshold` keeps; a tie keeps.
pub fn binarize_inference(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p >= threshold).collect()
}

/// Gates for every gated layer of both stages. An empty stage means that
/// stage ran ungated.
#[derive(Debug, Clone)]
pub struct GateSet {
    pub granularity: ExecMode,
    pub encoder: Vec<Vec<ModuleGate>>,
    pub decoder: Vec<Vec<ModuleGate>>,
}

impl GateSet {
    pub fn new(granularity: ExecMode) -> Self {
        Self {
            granularity,
            encoder: Vec::new(),
            decoder: Vec::new(),
        }
    }

    /// Constant gates keeping (or pruning) every module at every position.
    pub fn uniform(
        granularity: ExecMode,
        enc: (usize, usize),
        dec: (usize, usize),
        keep: bool,
    ) -> Self {
        let build = |stage: Stage, (layers, positions): (usize, usize)| -> Vec<Vec<ModuleGate>> {
            (0..layers)
                .map(|l| {
                    stage
                        .kinds()
                        .into_iter()
                        .map(|k| {
                            ModuleGate::constant(
                                PrunableModuleSpec::new(k, l),
                                vec![keep; positions],
                            )
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            granularity,
            encoder: build(Stage::Encoder, enc),
            decoder: build(Stage::Decoder, dec),
        }
    }

    pub fn stage(&self, stage: Stage) -> &Vec<Vec<ModuleGate>> {
        match stage {
            Stage::Encoder => &self.encoder,
            Stage::Decoder => &self.decoder,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut Vec<Vec<ModuleGate>> {
        match stage {
            Stage::Encoder => &mut self.encoder,
            Stage::Decoder => &mut self.decoder,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModuleGate> {
        self.encoder.iter().chain(&self.decoder).flatten()
    }

    pub fn get(&self, stage: Stage, layer: usize, kind: ModuleKind) -> Option<&ModuleGate> {
        self.stage(stage).get(layer)?.get(kind.index_in_layer())
    }

    /// Fraction of kept decisions in a stage; `None` if the stage is ungated.
    pub fn keep_rate(&self, stage: Stage) -> Option<f64> {
        let (kept, total) = self
            .stage(stage)
            .iter()
            .flatten()
            .fold((0usize, 0usize), |(k, t), g| {
                (k + g.kept(), t + g.positions())
            });
        (total > 0).then(|| kept as f64 / total as f64)
    }

    /// Differentiable keep probabilities of a stage (training only).
    pub fn keep_prob_tensors(&self, stage: Stage) -> Vec<Tensor> {
        self.stage(stage)
            .iter()
            .flatten()
            .filter_map(|g| g.keep_prob.clone())
            .collect()
    }

    pub fn records(&self, utt: usize) -> Vec<GateRecord> {
        self.iter()
            .flat_map(|g| {
                (0..g.positions()).map(move |p| GateRecord {
                    utt,
                    stage: g.spec.kind.stage(),
                    layer: g.spec.layer_index,
                    module_kind: g.spec.kind.name().to_string(),
                    position: p,
                    probability: g.probabilities[p],
                    decision: u8::from(g.decisions[p]),
                })
            })
            .collect()
    }

    /// Rebuilds a gate set from dump records of one utterance.
    pub fn from_records(granularity: ExecMode, records: &[GateRecord]) -> Result<Self> {
        let mut set = GateSet::new(granularity);
        for stage in [Stage::Encoder, Stage::Decoder] {
            let recs: Vec<&GateRecord> = records.iter().filter(|r| r.stage == stage).collect();
            let Some(layers) = recs.iter().map(|r| r.layer + 1).max() else {
                continue;
            };
            let mut layers_out = Vec::with_capacity(layers);
            for layer in 0..layers {
                let mut gates = Vec::with_capacity(3);
                for kind in stage.kinds() {
                    let mut rows: Vec<&&GateRecord> = recs
                        .iter()
                        .filter(|r| r.layer == layer && r.module_kind == kind.name())
                        .collect();
                    rows.sort_by_key(|r| r.position);
                    if rows.iter().enumerate().any(|(i, r)| r.position != i) {
                        return Err(Error::Format(format!(
                            "gaps in positions of {kind} layer {layer}"
                        )));
                    }
                    gates.push(ModuleGate {
                        spec: PrunableModuleSpec::new(kind, layer),
                        probabilities: rows.iter().map(|r| r.probability).collect(),
                        decisions: rows.iter().map(|r| r.decision == 1).collect(),
                        mask: None,
                        keep_prob: None,
                    });
                }
                layers_out.push(gates);
            }
            *set.stage_mut(stage) = layers_out;
        }
        Ok(set)
    }
}

/// One row of the gate dump CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub utt: usize,
    pub stage: Stage,
    pub layer: usize,
    pub module_kind: String,
    pub position: usize,
    pub probability: f64,
    pub decision: u8,
}

/// Supplies gates layer by layer during a forward pass.
pub trait Gating {
    /// Gates for the modules of `layer`, given that layer's input `x`;
    /// `None` runs the layer ungated.
    fn layer_gates(
        &mut self,
        stage: Stage,
        layer: usize,
        x: &Tensor,
    ) -> Result<Option<Vec<ModuleGate>>>;
}

/// Ungated (dense) execution.
pub struct NoGating;

impl Gating for NoGating {
    fn layer_gates(&mut self, _: Stage, _: usize, _: &Tensor) -> Result<Option<Vec<ModuleGate>>> {
        Ok(None)
    }
}

/// Replays a precomputed gate set.
pub struct FixedGates<'a>(pub &'a GateSet);

impl Gating for FixedGates<'_> {
    fn layer_gates(
        &mut self,
        stage: Stage,
        layer: usize,
        x: &Tensor,
    ) -> Result<Option<Vec<ModuleGate>>> {
        let layers = self.0.stage(stage);
        if layers.is_empty() {
            return Ok(None);
        }
        let gates = layers.get(layer).ok_or_else(|| {
            Error::Contract(format!("gate set has no {} layer {layer}", stage.name()))
        })?;
        if gates.len() != 3 {
            return Err(Error::Contract(format!(
                "{} layer {layer} has {} gates",
                stage.name(),
                gates.len()
            )));
        }
        let rows = x.shape()[0];
        let expected = match self.0.granularity {
            ExecMode::Temporal => rows,
            _ => 1,
        };
        if let Some(g) = gates.iter().find(|g| g.positions() != expected) {
            return Err(Error::Contract(format!(
                "{} gate has {} positions, expected {expected}",
                g.spec.kind,
                g.positions()
            )));
        }
        Ok(Some(gates.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_tie_keeps() {
        assert_eq!(binarize_inference(&[0.5], 0.5), vec![true]);
        assert_eq!(binarize_inference(&[0.49], 0.5), vec![false]);
    }

    #[test]
    fn records_round_trip() {
        let mut set = GateSet::uniform(ExecMode::Temporal, (2, 3), (1, 2), true);
        set.encoder[1][2].decisions[1] = false;
        set.encoder[1][2].probabilities[1] = 0.2;
        let recs = set.records(7);
        assert_eq!(recs.len(), 2 * 3 * 3 + 3 * 2);
        let back = GateSet::from_records(ExecMode::Temporal, &recs).unwrap();
        assert_eq!(back.records(7), recs);
        assert_eq!(back.keep_rate(Stage::Encoder), Some(17.0 / 18.0));
    }

    #[test]
    fn fixed_gates_check_positions() {
        let set = GateSet::uniform(ExecMode::Temporal, (1, 4), (0, 0), true);
        let mut g = FixedGates(&set);
        assert!(g
            .layer_gates(Stage::Encoder, 0, &Tensor::zeros(&[4, 2]))
            .unwrap()
            .is_some());
        assert!(matches!(
            g.layer_gates(Stage::Encoder, 0, &Tensor::zeros(&[5, 2])),
            Err(Error::Contract(_))
        ));
        assert!(g
            .layer_gates(Stage::Decoder, 0, &Tensor::zeros(&[5, 2]))
            .unwrap()
            .is_none());
    }

    #[test]
    fn training_gate_is_binary_and_matches_mask() {
        let logits = Tensor::param(
            &[5, 2],
            vec![0.3, 0.0, -2.0, 1.0, 4.0, 0.0, 0.0, 0.0, 1.0, 1.5],
        )
        .unwrap();
        let mut rng = RngState::new(4);
        let spec = PrunableModuleSpec::new(ModuleKind::EncFfn, 0);
        let g = ModuleGate::from_logits(spec, &logits, true, 1.0, 0.5, &mut rng).unwrap();
        let mask = g.mask.unwrap().to_vec();
        for (m, d) in mask.iter().zip(&g.decisions) {
            assert!(*m == 0.0 || *m == 1.0);
            assert_eq!(*m == 1.0, *d);
        }
    }
}
