//! Run directories and the end-to-end training entry point.
//!
//! ```text
//! <run>/config.json        run configuration
//! <run>/metrics.csv        one row per step
//! <run>/checkpoint.bin     final parameters
//! <run>/eval/gates.csv     gate dump (utt, stage, layer, module_kind, position, probability, decision)
//! <run>/eval/frames.csv    utt, frame, label, energy
//! <run>/eval/tokens.csv    utt, position, token_id, surface, starts_word
//! <run>/eval/features.csv  utt, frame, f0..f{F-1}
//! <run>/eval/keep_rates.csv
//! <run>/eval/flops.json
//! <run>/eval/summary.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{evaluate, generate_dataset, EvalResult, RunConfig, StepMetrics, System, Trainer};
use crate::analysis::dump::{write_csv, write_features, EvalDump};
use crate::context::SyntheticUtterance;
use crate::error::{Error, Result};
use crate::flops::{count_flops_model, Extents, FlopsReport};
use crate::gates::{GateRecord, GateSet};
use crate::model::params::{ParamSource, ParamStore};
use crate::tensor::RngState;

pub struct RunWriter {
    dir: PathBuf,
    metrics: csv::Writer<File>,
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    steps: usize,
    token_accuracy: f64,
    mean_keep: Option<f64>,
    encoder_keep: Option<f64>,
    decoder_keep: Option<f64>,
    context: &'a str,
    gating: String,
    mode: String,
}

impl RunWriter {
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(config)?,
        )?;
        let metrics = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log(&mut self, m: &StepMetrics) -> Result<()> {
        self.metrics.serialize(m).map_err(csv_err)?;
        self.metrics.flush()?;
        Ok(())
    }

    pub fn write_checkpoint(&self, store: &ParamStore) -> Result<()> {
        store.save(&self.dir.join("checkpoint.bin"))
    }

    pub fn write_eval(
        &self,
        system: &System,
        eval: &EvalResult,
        dataset: &[SyntheticUtterance],
        steps: usize,
    ) -> Result<()> {
        let dir = self.dir.join("eval");
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("gates.csv"), &eval.gates)?;
        write_csv(&dir.join("frames.csv"), &eval.frames)?;
        write_csv(&dir.join("tokens.csv"), &eval.tokens)?;
        write_csv(&dir.join("keep_rates.csv"), &eval.keep_table)?;
        write_features(&dir.join("features.csv"), dataset)?;
        fs::write(dir.join("flops.json"), eval.flops.to_json()?)?;
        let summary = Summary {
            schema_version: 1,
            steps,
            token_accuracy: eval.token_accuracy,
            mean_keep: eval.mean_keep,
            encoder_keep: eval.encoder_keep,
            decoder_keep: eval.decoder_keep,
            context: &system.config.context.to_string(),
            gating: system.config.gating.to_string(),
            mode: system.config.effective_mode().to_string(),
        };
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(())
    }

    fn write_diagnostic(&self, message: &str, last: Option<&StepMetrics>) -> Result<()> {
        let body = serde_json::json!({ "error": message, "last_step": last });
        fs::write(
            self.dir.join("diagnostic.json"),
            serde_json::to_string_pretty(&body)?,
        )?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub struct RunOutcome {
    pub system: System,
    pub metrics: Vec<StepMetrics>,
    pub eval: EvalResult,
    pub eval_set: Vec<SyntheticUtterance>,
}

/// Builds a system (optionally starting from `init` parameters), trains it
/// for `config.train.steps` steps and evaluates it. With `out`, writes the
/// run directory.
pub fn run_training(
    config: RunConfig,
    init: Option<&ParamStore>,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate()?;
    let tc = config.train.clone();
    let seed = tc.seed;
    let data = generate_dataset(
        &config.task,
        &config.model,
        tc.train_size + tc.eval_size,
        seed,
    )?;
    let (train, eval_set) = data.split_at(tc.train_size);
    let system = System::new(
        config.clone(),
        ParamSource::Random(RngState::new(seed).fork(0x494e_4954)),
    )?;
    if let Some(src) = init {
        system.store.copy_matching(src);
    }
    let mut writer = out.map(|d| RunWriter::create(d, &config)).transpose()?;
    let mut trainer = Trainer::new(system, train.to_vec())?;
    let mut metrics = Vec::with_capacity(tc.steps);
    for _ in 0..tc.steps {
        match trainer.train_step() {
            Ok(m) => {
                if let Some(w) = writer.as_mut() {
                    w.log(&m)?;
                }
                metrics.push(m);
            }
            Err(e) => {
                if let Some(w) = &writer {
                    w.write_diagnostic(&e.to_string(), metrics.last())?;
                }
                return Err(e);
            }
        }
    }
    let system = trainer.system;
    let eval = evaluate(&system, eval_set)?;
    if let Some(w) = &writer {
        w.write_checkpoint(&system.store)?;
        w.write_eval(&system, &eval, eval_set, tc.steps)?;
    }
    Ok(RunOutcome {
        system,
        metrics,
        eval,
        eval_set: eval_set.to_vec(),
    })
}

/// Recomputes the FLOPs report of an evaluation from its dump. Utterance
/// extents come from `frames.csv` and `tokens.csv`; predictor overhead uses
/// the synthetic stream layout.
pub fn flops_from_dump(config: &RunConfig, dump: &EvalDump) -> Result<FlopsReport> {
    let system = System::new(config.clone(), ParamSource::Random(RngState::new(0)))?;
    let mode = config.effective_mode();
    let mut frames: BTreeMap<usize, usize> = BTreeMap::new();
    for f in &dump.frames {
        *frames.entry(f.utt).or_default() += 1;
    }
    let mut tokens: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &dump.tokens {
        *tokens.entry(t.utt).or_default() += 1;
    }
    let mut gates: BTreeMap<usize, Vec<GateRecord>> = BTreeMap::new();
    for g in &dump.gates {
        gates.entry(g.utt).or_default().push(g.clone());
    }
    if frames.is_empty() {
        return Err(Error::Contract("dump has no frame records".into()));
    }
    let reports = frames
        .iter()
        .map(|(&utt, &t)| {
            let extents = Extents {
                frames: t,
                tokens: *tokens.get(&utt).ok_or_else(|| {
                    Error::Contract(format!("no token records for utterance {utt}"))
                })?,
            };
            let set = GateSet::from_records(mode, gates.get(&utt).map_or(&[][..], Vec::as_slice))?;
            count_flops_model(
                &set,
                &config.model,
                mode,
                extents,
                &system.predictor_cost_for_frames(t),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    FlopsReport::accumulate(&reports)
}
