//! Layer-local gate predictor.
//!
//! For layer `i` with input `x` (`T × D`, one query per position) and a
//! context memory of `D^C` key/value slots per position:
//!
//! ```text
//! w      = softmax_c(<x_t, key_{t,c}>)          T × D^C
//! a      = sum_c w_{t,c} value_{t,c} + x_t        T × D
//! p_n    = t(head_n(a))                           T × 2, one head per module
//! key   <- key   ++ x
//! value <- value ++ value_proj(x)
//! ```
//!
//! so every layer sees the external context plus the inputs of all earlier
//! layers, and the memory grows by one slot per layer.

use super::{Gating, ModuleGate};
use crate::context::{ContextAligner, ContextBundle, RawStream, StreamKind};
use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::model::params::ParamBuilder;
use crate::model::{ModelConfig, PrunableModuleSpec, Stage};
use crate::tensor::{RngState, Tensor};

/// Initial gate-head bias: softmax([2.2, 0])[0] = sigmoid(2.2) ≈ 0.90 keep.
pub const KEEP_BIAS: f64 = 2.2;

/// Key/value memory, one `T × D` tensor per context slot.
#[derive(Debug, Clone)]
pub struct GatePredictorState {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl GatePredictorState {
    /// `D^C`, the number of context slots.
    pub fn context_count(&self) -> usize {
        self.keys.len()
    }

    pub fn positions(&self) -> usize {
        self.keys.first().map_or(0, |k| k.shape()[0])
    }

    fn width(&self) -> usize {
        self.keys.first().map_or(0, |k| k.shape()[1])
    }
}

/// Per-layer parameters: one two-class head per module and the value
/// projection applied to the layer input before it joins the memory.
#[derive(Debug, Clone)]
pub struct LocalLayerHeads {
    pub heads: Vec<Linear>,
    pub value_proj: Linear,
}

impl LocalLayerHeads {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, n_modules: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let heads = (0..n_modules)
            .map(|n| {
                Linear::with_values(
                    &mut s,
                    &format!("head{n}"),
                    d,
                    2,
                    vec![0.0; 2 * d],
                    vec![KEEP_BIAS, 0.0],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let value_proj = Linear::new(&mut s, "value_proj", d, d, true)?;
        Ok(Self { heads, value_proj })
    }
}

/// Cross-attention of each position's query over its context slots, with a
/// residual connection. Unscaled unless `scaled`.
pub fn context_attention(x: &Tensor, state: &GatePredictorState, scaled: bool) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    if state.context_count() == 0 {
        return Err(Error::Contract(
            "gate predictor state has no context".into(),
        ));
    }
    if state.positions() != t || state.width() != d {
        return Err(Error::Contract(format!(
            "query {t}×{d} does not match context memory {}×{}",
            state.positions(),
            state.width()
        )));
    }
    let scores = state
        .keys
        .iter()
        .map(|k| x.mul(k)?.sum_cols())
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Tensor::concat_cols(&scores)?;
    if scaled {
        scores = scores.scale(1.0 / (d as f64).sqrt());
    }
    let weights = scores.softmax(1)?;
    let mut a = x.clone();
    for (c, v) in state.values.iter().enumerate() {
        a = a.add(&v.mul_col(&weights.narrow_cols(c, 1)?)?)?;
    }
    Ok(a)
}

/// Gate sampling / thresholding options.
#[derive(Debug, Clone, Copy)]
pub struct GateMode {
    pub training: bool,
    pub temperature: f64,
    pub threshold: f64,
    pub scaled: bool,
    /// Pool the attended representation over positions and emit one
    /// decision per module.
    pub utterance: bool,
}

/// One layer of the local predictor: gates for that layer's modules and the
/// memory extended by the layer input.
pub fn local_gate_forward(
    heads: &LocalLayerHeads,
    stage: Stage,
    layer: usize,
    x: &Tensor,
    mut state: GatePredictorState,
    mode: GateMode,
    rng: &mut RngState,
) -> Result<(Vec<ModuleGate>, GatePredictorState)> {
    if heads.heads.len() != stage.kinds().len() {
        return Err(Error::Contract("one gate head per module required".into()));
    }
    let mut a = context_attention(x, &state, mode.scaled)?;
    if mode.utterance {
        a = a.mean_rows()?;
    }
    let gates = stage
        .kinds()
        .into_iter()
        .zip(&heads.heads)
        .map(|(kind, head)| {
            let logits = head.forward(&a)?;
            ModuleGate::from_logits(
                PrunableModuleSpec::new(kind, layer),
                &logits,
                mode.training,
                mode.temperature,
                mode.threshold,
                rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    state.values.push(heads.value_proj.forward(x)?);
    state.keys.push(x.clone());
    Ok((gates, state))
}

/// Local predictor for one stage.
#[derive(Debug, Clone)]
pub struct LocalGatePredictor {
    pub stage: Stage,
    pub streams: Vec<StreamKind>,
    pub aligner: ContextAligner,
    /// Value projection of the initial context slots.
    pub context_value: Linear,
    pub layers: Vec<LocalLayerHeads>,
    pub scaled: bool,
}

impl LocalGatePredictor {
    /// `streams` is the stage's own stream list. The decoder predictor
    /// additionally always carries `lang2vec`.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        stage: Stage,
        streams: &[StreamKind],
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mut streams = streams.to_vec();
        if stage == Stage::Decoder && !streams.contains(&StreamKind::Lang2vec) {
            streams.push(StreamKind::Lang2vec);
        }
        let mut s = pb.scope(&format!("local_gp.{}", stage.name()));
        let aligner = ContextAligner::new(&mut s, &streams, cfg)?;
        let context_value = Linear::new(
            &mut s,
            "context_value",
            cfg.context_dim,
            cfg.context_dim,
            true,
        )?;
        let n_layers = match stage {
            Stage::Encoder => cfg.n_enc_layers,
            Stage::Decoder => cfg.n_dec_layers,
        };
        let layers = (0..n_layers)
            .map(|l| {
                LocalLayerHeads::new(
                    &mut s,
                    &format!("layer{l}"),
                    cfg.context_dim,
                    stage.kinds().len(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stage,
            streams,
            aligner,
            context_value,
            layers,
            scaled: cfg.scaled_gate_attention,
        })
    }

    /// Memory for a pass over `positions` rows. Decoder memories hold each
    /// stream averaged over time (plus the language vector), repeated per token.
    pub fn init_state(
        &self,
        bundle: &ContextBundle,
        positions: usize,
    ) -> Result<GatePredictorState> {
        let bundle = match self.stage {
            Stage::Encoder => bundle.clone(),
            Stage::Decoder => bundle.pooled()?,
        };
        let keys = self.aligner.align(&bundle, positions)?;
        let values = keys
            .iter()
            .map(|k| self.context_value.forward(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(GatePredictorState { keys, values })
    }
}

/// [`Gating`] backed by local predictors for the encoder and/or decoder.
pub struct LocalGating<'a> {
    encoder: Option<(
        &'a LocalGatePredictor,
        ContextBundle,
        Option<GatePredictorState>,
    )>,
    decoder: Option<(
        &'a LocalGatePredictor,
        ContextBundle,
        Option<GatePredictorState>,
    )>,
    pub rng: RngState,
    pub mode: GateMode,
}

impl<'a> LocalGating<'a> {
    /// `bundle` holds the encoder-side streams; for the decoder, `lang2vec`
    /// must be resolvable from `lang_vector` when the bundle lacks it.
    pub fn new(
        encoder: Option<&'a LocalGatePredictor>,
        decoder: Option<&'a LocalGatePredictor>,
        bundle: &ContextBundle,
        lang_vector: Option<Tensor>,
        rng: RngState,
        mode: GateMode,
    ) -> Result<Self> {
        let encoder = encoder.map(|p| (p, subset(bundle, &p.streams), None));
        let decoder = match decoder {
            Some(p) => {
                let mut b = subset(bundle, &p.streams);
                if !b.kinds().contains(&StreamKind::Lang2vec)
                    && p.streams.contains(&StreamKind::Lang2vec)
                {
                    let data = lang_vector.ok_or_else(|| {
                        Error::Contract("decoder gating needs a language vector".into())
                    })?;
                    b.streams.push(RawStream {
                        kind: StreamKind::Lang2vec,
                        data,
                    });
                }
                Some((p, b, None))
            }
            None => None,
        };
        Ok(Self {
            encoder,
            decoder,
            rng,
            mode,
        })
    }

    /// Current `D^C` of a stage's memory, if a pass has started.
    pub fn context_count(&self, stage: Stage) -> Option<usize> {
        let slot = match stage {
            Stage::Encoder => &self.encoder,
            Stage::Decoder => &self.decoder,
        };
        slot.as_ref()
            .and_then(|(_, _, s)| s.as_ref().map(GatePredictorState::context_count))
    }
}

fn subset(bundle: &ContextBundle, kinds: &[StreamKind]) -> ContextBundle {
    ContextBundle {
        streams: bundle
            .streams
            .iter()
            .filter(|s| kinds.contains(&s.kind))
            .cloned()
            .collect(),
    }
}

impl Gating for LocalGating<'_> {
    fn layer_gates(
        &mut self,
        stage: Stage,
        layer: usize,
        x: &Tensor,
    ) -> Result<Option<Vec<ModuleGate>>> {
        let slot = match stage {
            Stage::Encoder => &mut self.encoder,
            Stage::Decoder => &mut self.decoder,
        };
        let Some((predictor, bundle, state)) = slot else {
            return Ok(None);
        };
        let heads = predictor.layers.get(layer).ok_or_else(|| {
            Error::Contract(format!("no gate heads for {} layer {layer}", stage.name()))
        })?;
        let current = match state.take() {
            Some(s) if layer > 0 => s,
            _ => predictor.init_state(bundle, x.shape()[0])?,
        };
        let (gates, next) =
            local_gate_forward(heads, stage, layer, x, current, self.mode, &mut self.rng)?;
        *state = Some(next);
        Ok(Some(gates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ParamSource, ParamStore};

    fn inference() -> GateMode {
        GateMode {
            training: false,
            temperature: 1.0,
            threshold: 0.5,
            scaled: false,
            utterance: false,
        }
    }

    #[test]
    fn zero_context_value_leaves_query() {
        let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let state = GatePredictorState {
            keys: vec![Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, -2.0]]).unwrap()],
            values: vec![Tensor::zeros(&[2, 2])],
        };
        let a = context_attention(&x, &state, false).unwrap();
        assert_eq!(a.to_vec(), x.to_vec());
    }

    #[test]
    fn keep_bias_gives_ninety_percent() {
        let mut store = ParamStore::default();
        let mut src = ParamSource::Random(RngState::new(0));
        let mut pb = ParamBuilder::new(&mut store, &mut src);
        let heads = LocalLayerHeads::new(&mut pb, "l0", 8, 3).unwrap();
        let x = Tensor::new(&[5, 8], (0..40).map(|i| (i as f64).sin()).collect()).unwrap();
        let state = GatePredictorState {
            keys: vec![x.scale(0.3)],
            values: vec![x.scale(-0.1)],
        };
        let mut rng = RngState::new(1);
        let (gates, next) =
            local_gate_forward(&heads, Stage::Encoder, 0, &x, state, inference(), &mut rng)
                .unwrap();
        let expected = 1.0 / (1.0 + (-2.2f64).exp());
        assert!((expected - 0.9).abs() < 1e-3);
        for g in &gates {
            for p in &g.probabilities {
                assert!((p - expected).abs() < 1e-12);
            }
            assert!(g.decisions.iter().all(|&d| d));
        }
        assert_eq!(next.context_count(), 2);
    }

    #[test]
    fn mismatched_query_width_is_contract_error() {
        let state = GatePredictorState {
            keys: vec![Tensor::zeros(&[3, 4])],
            values: vec![Tensor::zeros(&[3, 4])],
        };
        assert!(matches!(
            context_attention(&Tensor::zeros(&[3, 5]), &state, false),
            Err(Error::Contract(_))
        ));
    }
}
