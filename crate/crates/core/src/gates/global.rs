//! Utterance-wise gate predictor: one decision per module for the whole
//! utterance, predicted for every layer at once.

use super::local::{GateMode, KEEP_BIAS};
use super::{GateSet, ModuleGate};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::layers::Linear;
use crate::model::params::ParamBuilder;
use crate::model::{ModelConfig, PrunableModuleSpec, Stage};
use crate::tensor::{RngState, Tensor};

/// Width of the discrete-context embedding.
pub const CONTEXT_EMBED_DIM: usize = 16;

/// Two-layer MLP on `[mean-pooled frontend ‖ context embedding]` emitting a
/// keep/prune logit pair per module.
#[derive(Debug, Clone)]
pub struct GlobalGatePredictor {
    pub context_embed: Tensor,
    pub hidden: Linear,
    pub out: Linear,
    pub modules: Vec<PrunableModuleSpec>,
}

impl GlobalGatePredictor {
    /// Predicts gates for every module of the listed stages. `n_contexts`
    /// is the number of discrete context ids.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &ModelConfig,
        stages: &[Stage],
        n_contexts: usize,
    ) -> Result<Self> {
        if n_contexts == 0 {
            return Err(Error::Parameter(
                "global gate predictor needs at least one context id".into(),
            ));
        }
        let modules: Vec<_> = stages
            .iter()
            .flat_map(|&s| {
                let layers = match s {
                    Stage::Encoder => cfg.n_enc_layers,
                    Stage::Decoder => cfg.n_dec_layers,
                };
                PrunableModuleSpec::enumerate(s, layers)
            })
            .collect();
        let mut s = pb.scope("global_gp");
        let context_embed = s.normal("context_embed", &[n_contexts, CONTEXT_EMBED_DIM], 1.0)?;
        let hidden = Linear::new(
            &mut s,
            "hidden",
            cfg.d_model + CONTEXT_EMBED_DIM,
            cfg.global_hidden,
            true,
        )?;
        let m = modules.len();
        let mut rng = RngState::new(0x6a0b);
        let weight = (0..cfg.global_hidden * 2 * m)
            .map(|_| (rng.uniform() - 0.5) * 0.02)
            .collect();
        let bias = (0..m).flat_map(|_| [KEEP_BIAS, 0.0]).collect();
        let out = Linear::with_values(&mut s, "out", cfg.global_hidden, 2 * m, weight, bias)?;
        Ok(Self {
            context_embed,
            hidden,
            out,
            modules,
        })
    }

    /// `pooled` is the `1 × d` mean of the frontend output.
    pub fn forward(
        &self,
        pooled: &Tensor,
        context_id: usize,
        mode: GateMode,
        rng: &mut RngState,
    ) -> Result<GateSet> {
        let n_ctx = self.context_embed.shape()[0];
        if context_id >= n_ctx {
            return Err(Error::Parameter(format!(
                "context id {context_id} outside 0..{n_ctx}"
            )));
        }
        let e = Tensor::embed(&self.context_embed, &[context_id])?;
        let h = self
            .hidden
            .forward(&Tensor::concat_cols(&[pooled.clone(), e])?)?
            .tanh();
        let logits = self.out.forward(&h)?.reshape(&[self.modules.len(), 2])?;
        let mut set = GateSet::new(ExecMode::Utterance);
        for (m, spec) in self.modules.iter().enumerate() {
            let row = logits.gather_rows(&[m])?;
            let gate = ModuleGate::from_logits(
                *spec,
                &row,
                mode.training,
                mode.temperature,
                mode.threshold,
                rng,
            )?;
            let layers = set.stage_mut(spec.kind.stage());
            if layers.len() <= spec.layer_index {
                layers.resize_with(spec.layer_index + 1, Vec::new);
            }
            layers[spec.layer_index].push(gate);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ParamSource, ParamStore};

    fn predictor(cfg: &ModelConfig) -> GlobalGatePredictor {
        let mut store = ParamStore::default();
        let mut src = ParamSource::Random(RngState::new(11));
        let mut pb = ParamBuilder::new(&mut store, &mut src);
        GlobalGatePredictor::new(&mut pb, cfg, &[Stage::Encoder, Stage::Decoder], 3).unwrap()
    }

    fn mode(training: bool) -> GateMode {
        GateMode {
            training,
            temperature: 1.0,
            threshold: 0.5,
            scaled: false,
            utterance: true,
        }
    }

    #[test]
    fn keep_biased_init_keeps_everything() {
        let cfg = ModelConfig::default();
        let gp = predictor(&cfg);
        let pooled = Tensor::full(&[1, cfg.d_model], 0.3);
        let set = gp
            .forward(&pooled, 1, mode(false), &mut RngState::new(0))
            .unwrap();
        assert_eq!(set.encoder.len(), cfg.n_enc_layers);
        assert_eq!(set.decoder.len(), cfg.n_dec_layers);
        assert!(set.iter().all(|g| g.decisions == vec![true]));
    }

    #[test]
    fn same_seed_same_gates() {
        let cfg = ModelConfig::default();
        let gp = predictor(&cfg);
        let pooled = Tensor::full(&[1, cfg.d_model], -0.2);
        let a = gp
            .forward(&pooled, 0, mode(true), &mut RngState::new(9))
            .unwrap();
        let b = gp
            .forward(&pooled, 0, mode(true), &mut RngState::new(9))
            .unwrap();
        assert_eq!(a.records(0), b.records(0));
    }

    #[test]
    fn unknown_context_rejected() {
        let cfg = ModelConfig::default();
        let gp = predictor(&cfg);
        let pooled = Tensor::zeros(&[1, cfg.d_model]);
        assert!(gp
            .forward(&pooled, 3, mode(false), &mut RngState::new(0))
            .is_err());
    }
}
