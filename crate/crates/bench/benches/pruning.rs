use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ctxgate_core::exec::ExecMode;
use ctxgate_core::flops::{count_flops_model, Extents, PredictorCost};
use ctxgate_core::gates::{FixedGates, GateSet, ModuleGate, NoGating};
use ctxgate_core::model::params::ParamSource;
use ctxgate_core::{Model, ModelConfig, PrunableModuleSpec, RngState, Stage, Tensor};

fn random(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform() - 0.5).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

fn temporal_gates(cfg: &ModelConfig, frames: usize, keep: f64, rng: &mut RngState) -> GateSet {
    let mut set = GateSet::new(ExecMode::Temporal);
    set.encoder = (0..cfg.n_enc_layers)
        .map(|l| {
            Stage::Encoder
                .kinds()
                .into_iter()
                .map(|k| {
                    let d = (0..frames).map(|_| rng.uniform() < keep).collect();
                    ModuleGate::constant(PrunableModuleSpec::new(k, l), d)
                })
                .collect()
        })
        .collect();
    set
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = RngState::new(1);
    for n in [16, 64, 128] {
        let a = random(&mut rng, n, n);
        let b = random(&mut rng, n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let (model, _) = Model::build(&cfg, ParamSource::Random(RngState::new(2))).unwrap();
    let mut rng = RngState::new(3);
    let frames = 48;
    let feats = random(&mut rng, frames, cfg.feature_dim);
    let gates = temporal_gates(&cfg, frames, 0.7, &mut rng);

    let mut group = c.benchmark_group("encoder_forward");
    group.bench_function("dense", |b| {
        b.iter(|| {
            black_box(
                model
                    .encoder_forward(&feats, &mut NoGating, ExecMode::Dense)
                    .unwrap(),
            )
        })
    });
    group.bench_function("temporal_keep_0.7", |b| {
        b.iter(|| {
            let mut g = FixedGates(&gates);
            black_box(
                model
                    .encoder_forward(&feats, &mut g, ExecMode::Temporal)
                    .unwrap(),
            )
        })
    });
    group.finish();
}

fn bench_flops(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut rng = RngState::new(4);
    let frames = 48;
    let gates = temporal_gates(&cfg, frames, 0.7, &mut rng);
    let extents = Extents { frames, tokens: 8 };
    c.bench_function("count_flops_model", |b| {
        b.iter(|| {
            black_box(
                count_flops_model(
                    &gates,
                    &cfg,
                    ExecMode::Temporal,
                    extents,
                    &PredictorCost::None,
                )
                .unwrap(),
            )
        })
    });
}

criterion_group!(benches, bench_matmul, bench_encoder, bench_flops);
criterion_main!(benches);
