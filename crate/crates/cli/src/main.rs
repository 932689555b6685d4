use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctxgate_core::analysis::{
    render_heatmap, src_attention_token_stats, token_gate_records, vad_likeness, EvalDump,
};
use ctxgate_core::model::params::ParamStore;
use ctxgate_core::train::{flops_from_dump, run_training, GatingKind, PruneScope, RunConfig};
use ctxgate_core::{ContextConfig, ExecMode};

#[derive(Parser)]
#[command(
    name = "ctxgate",
    version,
    about = "Context-driven dynamic pruning on a toy speech model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Analyse an evaluation dump.
    #[command(subcommand)]
    Analyze(Analysis),
    /// Recompute the FLOPs report of a run from its gate dump.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Context streams joined by '+', e.g. front+spk.
    #[arg(long)]
    context: Option<ContextConfig>,
    /// none, global or local.
    #[arg(long)]
    gating: Option<GatingKind>,
    /// temporal or utterance.
    #[arg(long)]
    mode: Option<ExecMode>,
    /// encoder, decoder or both.
    #[arg(long)]
    scope: Option<PruneScope>,
    #[arg(long)]
    steps: Option<usize>,
    /// Directory of externally extracted context embeddings.
    #[arg(long)]
    context_dir: Option<PathBuf>,
    /// Checkpoint whose matching parameters initialise the model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Analysis {
    /// Per-layer keep-rate difference between speech and silence frames (JSON).
    Vad(IoArgs),
    /// Source-attention usage of word-initial vs word-internal tokens (JSON).
    Tokens(IoArgs),
    /// Energy and keep-mask SVG for one utterance.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct IoArgs {
    /// Evaluation directory containing gates.csv and friends.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Utterance id; defaults to the first one in the dump.
    #[arg(long)]
    utt: Option<usize>,
    #[arg(long, default_value = "self_attn")]
    module: String,
}

#[derive(Args)]
struct FlopsArgs {
    /// Run directory (config.json plus eval/).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Analyze(Analysis::Vad(io)) => {
            let dump = load_dump(&io.input)?;
            let report = vad_likeness(&dump.gates, &dump.frames)?;
            write_json(&io.output, &report)?;
            for (layer, score) in &report.layers {
                println!("layer {layer}: {score:+.3}");
            }
            Ok(())
        }
        Command::Analyze(Analysis::Tokens(io)) => {
            let dump = load_dump(&io.input)?;
            let records = token_gate_records(&dump.gates, &dump.tokens)?;
            let report = src_attention_token_stats(&records);
            write_json(&io.output, &report)?;
            let p = &report.pooled;
            println!(
                "word-initial {} / word-internal {}",
                p.n_word_start, p.n_word_internal
            );
            if let Some(mw) = &p.mann_whitney {
                println!(
                    "mann-whitney U = {:.1}, p = {}",
                    mw.statistic,
                    mw.p_display()
                );
            }
            if let Some(w) = &p.welch {
                println!("welch t = {:.3}, p = {}", w.statistic, w.p_display());
            }
            Ok(())
        }
        Command::Analyze(Analysis::Heatmap(args)) => heatmap(args),
        Command::Flops(args) => {
            let config = read_config(&args.input.join("config.json"))?;
            let dump = load_dump(&args.input.join("eval"))?;
            let report = flops_from_dump(&config, &dump)?;
            fs::write(&args.output, report.to_json()?)
                .with_context(|| format!("writing {}", args.output.display()))?;
            println!(
                "encoder GFLOPs dense {:.6} pruned {:.6}",
                report.encoder_gflops_dense, report.encoder_gflops_pruned
            );
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(context) = args.context {
        config.context = context;
    }
    if let Some(gating) = args.gating {
        config.gating = gating;
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(scope) = args.scope {
        config.scope = scope;
    }
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if args.context_dir.is_some() {
        config.context_dir = args.context_dir;
    }
    let init = args
        .init
        .as_deref()
        .map(|p| ParamStore::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let outcome = run_training(config, init.as_ref(), Some(&args.out))?;
    let eval = &outcome.eval;
    println!("token accuracy {:.4}", eval.token_accuracy);
    if let Some(keep) = eval.mean_keep {
        println!("mean keep {keep:.4}");
    }
    println!(
        "encoder GFLOPs dense {:.6} pruned {:.6}",
        eval.flops.encoder_gflops_dense, eval.flops.encoder_gflops_pruned
    );
    println!("run written to {}", args.out.display());
    Ok(())
}

fn heatmap(args: HeatmapArgs) -> Result<()> {
    let dump = load_dump(&args.io.input)?;
    let utt = match args.utt.or_else(|| dump.frames.first().map(|f| f.utt)) {
        Some(u) => u,
        None => bail!("{} has no frame records", args.io.input.display()),
    };
    let mut frames: Vec<_> = dump.frames.iter().filter(|f| f.utt == utt).collect();
    if frames.is_empty() {
        bail!("no frames for utterance {utt}");
    }
    frames.sort_by_key(|f| f.frame);
    let energy: Vec<f64> = frames.iter().map(|f| f.energy).collect();
    let svg = render_heatmap(&dump.gates, &energy, utt, &args.module)?;
    fs::write(&args.io.output, svg)
        .with_context(|| format!("writing {}", args.io.output.display()))?;
    Ok(())
}

fn load_dump(dir: &Path) -> Result<EvalDump> {
    EvalDump::load(dir).with_context(|| format!("reading dump in {}", dir.display()))
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
