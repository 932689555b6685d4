//! Sparsity-regularised training and evaluation on synthetic tasks.

pub mod data;
pub mod optim;
mod run;

pub use data::{generate_dataset, starts_word, TaskKind, TaskSpec, Vocab, EOS};
pub use optim::{anneal, warmup_lr, Adam};
pub use run::{flops_from_dump, run_training, RunOutcome, RunWriter};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::dump::{FrameRecord, TokenRecord};
use crate::context::{
    ContextConfig, ContextSource, StreamKind, SyntheticContext, SyntheticUtterance,
};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::flops::{count_flops_model, Extents, FlopsReport, PredictorCost, StreamShape};
use crate::gates::{
    FixedGates, GateMode, GateRecord, GateSet, Gating, GlobalGatePredictor, LocalGatePredictor,
    LocalGating, NoGating,
};
use crate::model::params::{ParamBuilder, ParamSource, ParamStore};
use crate::model::{argmax, gate_set, Model, ModelConfig, Stage};
use crate::tensor::{no_grad, RngState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    /// Sparsity weight λ, ramped linearly from 0 over the warmup.
    pub sparsity_weight: f64,
    pub target_keep_ratio: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Annealing length; half the run when unset.
    pub anneal_steps: Option<usize>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-3,
            warmup_steps: 300,
            steps: 3000,
            sparsity_weight: 1.0,
            target_keep_ratio: 0.7,
            temperature_start: 1.0,
            temperature_end: 0.5,
            anneal_steps: None,
            grad_clip: Some(5.0),
            seed: 0,
            train_size: 1000,
            eval_size: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.sparsity_weight >= 0.0) {
            return Err(Error::Parameter(
                "sparsity weight must be nonnegative".into(),
            ));
        }
        if !(self.target_keep_ratio > 0.0 && self.target_keep_ratio <= 1.0) {
            return Err(Error::Parameter(
                "target keep ratio must lie in (0, 1]".into(),
            ));
        }
        if !(self.temperature_end > 0.0 && self.temperature_start >= self.temperature_end) {
            return Err(Error::Parameter(
                "temperature must anneal downwards to a positive value".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Parameter("datasets must be nonempty".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, step: usize) -> f64 {
        let n = self.anneal_steps.unwrap_or(self.steps / 2);
        anneal(step, self.temperature_start, self.temperature_end, n)
    }

    pub fn lambda(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.sparsity_weight;
        }
        self.sparsity_weight * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingKind {
    None,
    Global,
    Local,
}

impl FromStr for GatingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            _ => Err(Error::Format(format!("unknown gating {s:?}"))),
        }
    }
}

impl fmt::Display for GatingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Global => "global",
            Self::Local => "local",
        })
    }
}

/// Which stacks are gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneScope {
    Encoder,
    Decoder,
    Both,
}

impl PruneScope {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            Self::Encoder => vec![Stage::Encoder],
            Self::Decoder => vec![Stage::Decoder],
            Self::Both => vec![Stage::Encoder, Stage::Decoder],
        }
    }

    pub fn includes(self, stage: Stage) -> bool {
        self.stages().contains(&stage)
    }
}

impl FromStr for PruneScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "both" => Ok(Self::Both),
            _ => Err(Error::Format(format!("unknown prune scope {s:?}"))),
        }
    }
}

fn default_context() -> ContextConfig {
    ContextConfig::new(vec![StreamKind::Front, StreamKind::Spk, StreamKind::Event])
        .expect("distinct streams")
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub context: ContextConfig,
    pub context_dir: Option<PathBuf>,
    pub gating: GatingKind,
    pub mode: ExecMode,
    pub scope: PruneScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            context: default_context(),
            context_dir: None,
            gating: GatingKind::Local,
            mode: ExecMode::Temporal,
            scope: PruneScope::Both,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate(&self.model)?;
        match (self.gating, self.mode) {
            (GatingKind::None, _) => {}
            (_, ExecMode::Dense) => {
                return Err(Error::Usage(
                    "gated runs need temporal or utterance execution".into(),
                ));
            }
            (GatingKind::Global, ExecMode::Temporal) => {
                return Err(Error::Usage(
                    "global gating is utterance-wise; use --mode utterance".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Execution mode actually used (ungated runs are dense).
    pub fn effective_mode(&self) -> ExecMode {
        if self.gating == GatingKind::None {
            ExecMode::Dense
        } else {
            self.mode
        }
    }
}

/// Model plus gate predictors, sharing one parameter store.
pub struct System {
    pub config: RunConfig,
    pub model: Model,
    pub local_encoder: Option<LocalGatePredictor>,
    pub local_decoder: Option<LocalGatePredictor>,
    pub global: Option<GlobalGatePredictor>,
    pub store: ParamStore,
    pub context: ContextSource,
    pub vocab: Vocab,
}

/// Result of one teacher-forced forward pass.
pub struct UttForward {
    pub logits: Tensor,
    pub task_loss: Tensor,
    pub gates: GateSet,
    /// Output token at each decoder position.
    pub targets: Vec<usize>,
}

impl System {
    pub fn new(config: RunConfig, mut source: ParamSource) -> Result<Self> {
        config.validate()?;
        let cfg = &config.model;
        let mut store = ParamStore::default();
        let mut pb = ParamBuilder::new(&mut store, &mut source);
        let model = Model::new(&mut pb, cfg)?;
        let (mut local_encoder, mut local_decoder, mut global) = (None, None, None);
        match config.gating {
            GatingKind::None => {}
            GatingKind::Local => {
                if config.scope.includes(Stage::Encoder) {
                    local_encoder = Some(LocalGatePredictor::new(
                        &mut pb,
                        Stage::Encoder,
                        &config.context.streams,
                        cfg,
                    )?);
                }
                if config.scope.includes(Stage::Decoder) {
                    local_decoder = Some(LocalGatePredictor::new(
                        &mut pb,
                        Stage::Decoder,
                        &config.context.streams,
                        cfg,
                    )?);
                }
            }
            GatingKind::Global => {
                global = Some(GlobalGatePredictor::new(
                    &mut pb,
                    cfg,
                    &config.scope.stages(),
                    cfg.n_languages,
                )?);
            }
        }
        let mut context = ContextSource::synthetic(SyntheticContext::new(cfg, config.train.seed));
        context.dir = config.context_dir.clone();
        let vocab = Vocab::new(cfg.vocab_size, cfg.n_languages);
        Ok(Self {
            config,
            model,
            local_encoder,
            local_decoder,
            global,
            store,
            context,
            vocab,
        })
    }

    pub fn gate_mode(&self, training: bool, temperature: f64) -> GateMode {
        GateMode {
            training,
            temperature,
            threshold: self.config.model.gate_threshold,
            scaled: self.config.model.scaled_gate_attention,
            utterance: self.config.mode == ExecMode::Utterance,
        }
    }

    /// Decoder input (`bos` + targets) and output (targets + `eos`).
    pub fn decoder_io(&self, utt: &SyntheticUtterance) -> (Vec<usize>, Vec<usize>) {
        let mut input = vec![self.vocab.bos(utt.language_id)];
        input.extend(&utt.targets);
        let mut output = utt.targets.clone();
        output.push(EOS);
        (input, output)
    }

    /// Runs `f` with the gating this system uses for `utt`.
    pub fn with_gating<T>(
        &self,
        utt: &SyntheticUtterance,
        training: bool,
        temperature: f64,
        rng: &mut RngState,
        f: impl FnOnce(&mut dyn Gating) -> Result<T>,
    ) -> Result<T> {
        let mode = self.gate_mode(training, temperature);
        match self.config.gating {
            GatingKind::None => f(&mut NoGating),
            GatingKind::Local => {
                let bundle = self.context.bundle(utt, &self.config.context)?;
                let lang = match self.local_decoder {
                    Some(_) => Some(self.context.synthetic.make_lang_vector(utt.language_id)?),
                    None => None,
                };
                let mut gating = LocalGating::new(
                    self.local_encoder.as_ref(),
                    self.local_decoder.as_ref(),
                    &bundle,
                    lang,
                    rng.clone(),
                    mode,
                )?;
                let out = f(&mut gating)?;
                *rng = gating.rng;
                Ok(out)
            }
            GatingKind::Global => {
                let gp = self.global.as_ref().expect("global predictor built");
                let pooled = self
                    .model
                    .frontend_forward(&utt.features_tensor())?
                    .mean_rows()?;
                let set = gp.forward(&pooled, utt.language_id, mode, rng)?;
                f(&mut FixedGates(&set))
            }
        }
    }

    pub fn forward(
        &self,
        utt: &SyntheticUtterance,
        training: bool,
        temperature: f64,
        rng: &mut RngState,
    ) -> Result<UttForward> {
        let mode = self.config.effective_mode();
        let (input, targets) = self.decoder_io(utt);
        let feats = utt.features_tensor();
        let (enc, dec) = self.with_gating(utt, training, temperature, rng, |g| {
            let enc = self.model.encoder_forward(&feats, g, mode)?;
            let dec = self.model.decoder_forward(&input, enc.output(), g, mode)?;
            Ok((enc, dec))
        })?;
        let task_loss = dec.logits.cross_entropy(&targets)?;
        Ok(UttForward {
            gates: gate_set(mode, &enc, Some(&dec)),
            task_loss,
            logits: dec.logits,
            targets,
        })
    }

    /// Overhead description for FLOPs reports.
    pub fn predictor_cost(&self, utt: &SyntheticUtterance) -> Result<PredictorCost> {
        let bundle = match self.config.gating {
            GatingKind::Local => Some(self.context.bundle(utt, &self.config.context)?),
            _ => None,
        };
        Ok(self.predictor_cost_with(|k| {
            bundle
                .as_ref()
                .and_then(|b| b.streams.iter().find(|s| s.kind == k))
                .map_or(1, |s| s.data.shape()[0])
        }))
    }

    /// Overhead for an utterance of `frames` frames, with stream lengths
    /// taken from the synthetic provider's layout.
    pub fn predictor_cost_for_frames(&self, frames: usize) -> PredictorCost {
        self.predictor_cost_with(|k| SyntheticContext::rows(k, frames))
    }

    fn predictor_cost_with(&self, rows: impl Fn(StreamKind) -> usize) -> PredictorCost {
        let cfg = &self.config.model;
        match self.config.gating {
            GatingKind::None => PredictorCost::None,
            GatingKind::Global => PredictorCost::Global {
                context_embed_dim: crate::gates::CONTEXT_EMBED_DIM,
                modules: self.global.as_ref().map_or(0, |g| g.modules.len()),
            },
            GatingKind::Local => {
                let shapes = |p: &LocalGatePredictor, pooled: bool| -> Vec<StreamShape> {
                    p.streams
                        .iter()
                        .map(|&k| StreamShape {
                            rows: if pooled { 1 } else { rows(k) },
                            dim: k.raw_dim(cfg),
                        })
                        .collect()
                };
                PredictorCost::Local {
                    encoder: self.local_encoder.as_ref().map(|p| shapes(p, false)),
                    decoder: self.local_decoder.as_ref().map(|p| shapes(p, true)),
                }
            }
        }
    }
}

/// `Σ_stage (mean keep-probability − target)²` over the stages that carry
/// differentiable keep probabilities; `None` when no stage does.
pub fn sparsity_loss(gates: &[GateSet], target_keep_ratio: f64) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for stage in [Stage::Encoder, Stage::Decoder] {
        let probs: Vec<Tensor> = gates
            .iter()
            .flat_map(|g| g.keep_prob_tensors(stage))
            .collect();
        if probs.is_empty() {
            continue;
        }
        let dev = Tensor::concat_rows(&probs)?
            .mean()
            .add_scalar(-target_keep_ratio);
        let term = dev.mul(&dev)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Fraction of kept positions over every gate in `gates`.
pub fn mean_keep(gates: &[GateSet]) -> Option<f64> {
    let (k, n) = gates
        .iter()
        .flat_map(GateSet::iter)
        .fold((0usize, 0usize), |(k, n), g| {
            (k + g.kept(), n + g.positions())
        });
    (n > 0).then(|| k as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub temperature: f64,
    pub sparsity_weight: f64,
    pub task_loss: f64,
    pub sparsity_loss: f64,
    pub mean_keep: f64,
    pub grad_norm: f64,
}

const BATCH_LABEL: u64 = 0x4241_5443;
const GUMBEL_LABEL: u64 = 0x4755_4d42;

/// Owns the system, optimiser and training data of one run.
pub struct Trainer {
    pub system: System,
    pub optimizer: Adam,
    pub train_set: Vec<SyntheticUtterance>,
    pub step: usize,
    root: RngState,
}

impl Trainer {
    pub fn new(system: System, train_set: Vec<SyntheticUtterance>) -> Result<Self> {
        if train_set.is_empty() {
            return Err(Error::Parameter("empty training set".into()));
        }
        let optimizer = Adam::new(system.store.tensors());
        let root = RngState::new(system.config.train.seed);
        Ok(Self {
            system,
            optimizer,
            train_set,
            step: 0,
            root,
        })
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step + 1;
        let tc = self.system.config.train.clone();
        let lr = warmup_lr(step, tc.lr, tc.warmup_steps);
        let temperature = tc.temperature(self.step);
        let lambda = tc.lambda(self.step);
        let mut batch_rng = self.root.fork(BATCH_LABEL ^ step as u64);
        let mut gumbel = self.root.fork(GUMBEL_LABEL ^ step as u64);

        let mut task = Vec::with_capacity(tc.batch_size);
        let mut gate_sets = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let utt = &self.train_set[batch_rng.random_range(0..self.train_set.len())];
            let out = self.system.forward(utt, true, temperature, &mut gumbel)?;
            task.push(out.task_loss);
            gate_sets.push(out.gates);
        }
        let task_loss = Tensor::concat_rows(
            &task
                .iter()
                .map(|t| t.reshape(&[1, 1]))
                .collect::<Result<Vec<_>>>()?,
        )?
        .mean();
        let sparsity = sparsity_loss(&gate_sets, tc.target_keep_ratio)?;
        let total = match &sparsity {
            Some(s) if lambda > 0.0 => task_loss.add(&s.scale(lambda))?,
            _ => task_loss.clone(),
        };
        let value = total.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at step {step} (task {}, lr {lr}, temperature {temperature})",
                task_loss.item()
            )));
        }
        total.backward()?;
        let grad_norm = self.optimizer.step(lr, tc.grad_clip)?;
        self.step = step;
        Ok(StepMetrics {
            step,
            lr,
            temperature,
            sparsity_weight: lambda,
            task_loss: task_loss.item(),
            sparsity_loss: sparsity.map_or(0.0, |s| s.item()),
            mean_keep: mean_keep(&gate_sets).unwrap_or(1.0),
            grad_norm,
        })
    }
}

/// Keep rate of one (stage, layer, module) over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepRateRow {
    pub context: String,
    pub stage: Stage,
    pub layer: usize,
    pub module_kind: String,
    pub kept: usize,
    pub positions: usize,
    pub keep_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub token_accuracy: f64,
    pub mean_keep: Option<f64>,
    pub encoder_keep: Option<f64>,
    pub decoder_keep: Option<f64>,
    pub keep_table: Vec<KeepRateRow>,
    pub flops: FlopsReport,
    pub gates: Vec<GateRecord>,
    pub frames: Vec<FrameRecord>,
    pub tokens: Vec<TokenRecord>,
}

/// Inference-mode evaluation with teacher forcing.
pub fn evaluate(system: &System, dataset: &[SyntheticUtterance]) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Parameter("empty evaluation set".into()));
    }
    no_grad(|| {
        let mode = system.config.effective_mode();
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut sets = Vec::with_capacity(dataset.len());
        let mut reports = Vec::with_capacity(dataset.len());
        let mut gates = Vec::new();
        let mut frames = Vec::new();
        let mut tokens = Vec::new();
        let mut rng = RngState::new(0);
        for utt in dataset {
            let out = system.forward(utt, false, 1.0, &mut rng)?;
            let (rows, vocab) = out.logits.dims2()?;
            let data = out.logits.data();
            for (i, &t) in out.targets.iter().enumerate().take(rows) {
                correct += usize::from(argmax(&data[i * vocab..(i + 1) * vocab]) == t);
                total += 1;
            }
            drop(data);
            let extents = Extents {
                frames: utt.frames,
                tokens: out.targets.len(),
            };
            reports.push(count_flops_model(
                &out.gates,
                &system.config.model,
                mode,
                extents,
                &system.predictor_cost(utt)?,
            )?);
            gates.extend(out.gates.records(utt.id));
            let energy = utt.frame_energy();
            frames.extend((0..utt.frames).map(|t| FrameRecord {
                utt: utt.id,
                frame: t,
                label: utt.frame_labels[t],
                energy: energy[t],
            }));
            tokens.extend(out.targets.iter().enumerate().map(|(p, &id)| {
                let surface = system.vocab.surface(id);
                TokenRecord {
                    utt: utt.id,
                    position: p,
                    token_id: id,
                    starts_word: u8::from(starts_word(&surface)),
                    surface,
                }
            }));
            sets.push(out.gates);
        }
        let mut keep_table = Vec::new();
        let context = system.config.context.to_string();
        if let Some(first) = sets.first() {
            for g in first.iter() {
                let (kept, positions) = sets
                    .iter()
                    .filter_map(|s| s.get(g.spec.kind.stage(), g.spec.layer_index, g.spec.kind))
                    .fold((0, 0), |(k, n), g| (k + g.kept(), n + g.positions()));
                keep_table.push(KeepRateRow {
                    context: context.clone(),
                    stage: g.spec.kind.stage(),
                    layer: g.spec.layer_index,
                    module_kind: g.spec.kind.name().to_string(),
                    kept,
                    positions,
                    keep_rate: if positions == 0 {
                        0.0
                    } else {
                        kept as f64 / positions as f64
                    },
                });
            }
        }
        let stage_keep = |stage: Stage| {
            let (k, n) = sets
                .iter()
                .flat_map(|s| s.stage(stage).iter().flatten())
                .fold((0, 0), |(k, n), g| (k + g.kept(), n + g.positions()));
            (n > 0).then(|| k as f64 / n as f64)
        };
        Ok(EvalResult {
            token_accuracy: correct as f64 / total.max(1) as f64,
            mean_keep: mean_keep(&sets),
            encoder_keep: stage_keep(Stage::Encoder),
            decoder_keep: stage_keep(Stage::Decoder),
            keep_table,
            flops: FlopsReport::accumulate(&reports)?,
            gates,
            frames,
            tokens,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::ModuleGate;
    use crate::model::{ModuleKind, PrunableModuleSpec};

    fn gate_with_probs(p: &[f64]) -> GateSet {
        let mut set = GateSet::new(ExecMode::Temporal);
        let mut g = ModuleGate::constant(
            PrunableModuleSpec::new(ModuleKind::EncFfn, 0),
            vec![true; p.len()],
        );
        g.keep_prob = Some(Tensor::param(&[p.len(), 1], p.to_vec()).unwrap());
        set.encoder.push(vec![g]);
        set
    }

    #[test]
    fn sparsity_loss_values() {
        let at_target = sparsity_loss(&[gate_with_probs(&[0.6, 0.8])], 0.7)
            .unwrap()
            .unwrap();
        assert!(at_target.item().abs() < 1e-15);
        let full = sparsity_loss(&[gate_with_probs(&[1.0, 1.0])], 0.7)
            .unwrap()
            .unwrap();
        assert!((full.item() - 0.09).abs() < 1e-15);
        assert!(sparsity_loss(&[GateSet::new(ExecMode::Temporal)], 0.7)
            .unwrap()
            .is_none());
    }

    #[test]
    fn sparsity_gradient_points_to_target() {
        for (p, sign) in [(0.9, 1.0), (0.5, -1.0)] {
            let set = gate_with_probs(&[p]);
            let probs = set.encoder[0][0].keep_prob.clone().unwrap();
            sparsity_loss(&[set], 0.7)
                .unwrap()
                .unwrap()
                .backward()
                .unwrap();
            assert_eq!(probs.grad().unwrap()[0].signum(), sign);
        }
    }

    #[test]
    fn global_temporal_rejected() {
        let cfg = RunConfig {
            gating: GatingKind::Global,
            mode: ExecMode::Temporal,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn lambda_ramps_over_warmup() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lambda(0), 0.0);
        assert_eq!(tc.lambda(150), 0.5);
        assert_eq!(tc.lambda(1000), 1.0);
    }
}
