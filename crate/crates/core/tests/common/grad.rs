//! Finite-difference checks of every autodiff op and of whole-model losses.

use ctxgate_core::exec::ExecMode;
use ctxgate_core::gates::NoGating;
use ctxgate_core::model::params::ParamSource;
use ctxgate_core::tensor::gumbel_softmax_st_with_noise;
use ctxgate_core::train::{
    generate_dataset, sparsity_loss, GatingKind, RunConfig, System, TaskSpec,
};
use ctxgate_core::{ContextConfig, Model, RngState, Tensor};

use super::{constant, gradcheck, param, project, shapes, tiny_config};

/// One op checked over five shapes: `(name, worst relative error, shapes checked)`.
pub type OpResult = (&'static str, f64, usize);

fn over_shapes(
    name: &'static str,
    seed: u64,
    max: usize,
    mut case: impl FnMut(&mut RngState, usize, usize) -> f64,
) -> OpResult {
    let mut rng = RngState::new(seed ^ 0x6772_6164);
    let shapes = shapes(seed, max);
    let worst = shapes
        .iter()
        .map(|&(m, n)| case(&mut rng, m, n))
        .fold(0.0, f64::max);
    (name, worst, shapes.len())
}

fn unary(name: &'static str, seed: u64, op: impl Fn(&Tensor) -> Tensor + Copy) -> OpResult {
    over_shapes(name, seed, 6, move |rng, m, n| {
        let x = param(rng, &[m, n]);
        gradcheck(std::slice::from_ref(&x), || project(&op(&x), seed))
    })
}

fn binary(
    name: &'static str,
    seed: u64,
    op: impl Fn(&Tensor, &Tensor) -> Tensor + Copy,
) -> OpResult {
    over_shapes(name, seed, 6, move |rng, m, n| {
        let a = param(rng, &[m, n]);
        let b = param(rng, &[m, n]);
        gradcheck(&[a.clone(), b.clone()], || project(&op(&a, &b), seed))
    })
}

fn index_list(rng: &mut RngState, len: usize, bound: usize) -> Vec<usize> {
    (0..len)
        .map(|_| ((rng.uniform() * bound as f64) as usize).min(bound - 1))
        .collect()
}

pub fn op_suite() -> Vec<OpResult> {
    vec![
        over_shapes("matmul", 1, 5, |rng, m, n| {
            let k = 1 + (rng.uniform() * 4.0) as usize;
            let a = param(rng, &[m, k]);
            let b = param(rng, &[k, n]);
            gradcheck(&[a.clone(), b.clone()], || {
                project(&a.matmul(&b).unwrap(), 1)
            })
        }),
        unary("transpose", 2, |x| x.transpose().unwrap()),
        binary("add", 3, |a, b| a.add(b).unwrap()),
        binary("sub", 4, |a, b| a.sub(b).unwrap()),
        binary("mul", 5, |a, b| a.mul(b).unwrap()),
        over_shapes("add_row", 6, 6, |rng, m, n| {
            let x = param(rng, &[m, n]);
            let b = param(rng, &[1, n]);
            gradcheck(&[x.clone(), b.clone()], || {
                project(&x.add_row(&b).unwrap(), 6)
            })
        }),
        over_shapes("mul_col", 7, 6, |rng, m, n| {
            let x = param(rng, &[m, n]);
            let c = param(rng, &[m, 1]);
            gradcheck(&[x.clone(), c.clone()], || {
                project(&x.mul_col(&c).unwrap(), 7)
            })
        }),
        unary("scale", 8, |x| x.scale(-1.7)),
        unary("add_scalar", 9, |x| x.add_scalar(0.3)),
        unary("sum", 10, |x| x.sum().scale(0.5)),
        unary("mean", 11, |x| x.mean()),
        unary("sum_cols", 12, |x| x.sum_cols().unwrap()),
        unary("mean_rows", 13, |x| x.mean_rows().unwrap()),
        unary("softmax_rows", 14, |x| x.softmax(1).unwrap()),
        unary("softmax_cols", 15, |x| x.softmax(0).unwrap()),
        over_shapes("cross_entropy", 16, 6, |rng, m, n| {
            let x = param(rng, &[m, n]);
            let targets = index_list(rng, m, n);
            gradcheck(std::slice::from_ref(&x), || {
                x.cross_entropy(&targets).unwrap()
            })
        }),
        over_shapes("layer_norm", 17, 6, |rng, m, n| {
            let n = n.max(2);
            let x = param(rng, &[m, n]);
            let g = param(rng, &[n]);
            let b = param(rng, &[n]);
            gradcheck(&[x.clone(), g.clone(), b.clone()], || {
                project(&x.layer_norm(&g, &b, 1e-5).unwrap(), 17)
            })
        }),
        unary("gelu", 18, |x| x.gelu()),
        unary("tanh", 19, |x| x.tanh()),
        over_shapes("conv1d_depthwise", 20, 6, |rng, m, n| {
            let k = [1, 3, 5][(rng.uniform() * 3.0) as usize % 3];
            let x = param(rng, &[m, n]);
            let w = param(rng, &[k, n]);
            let b = param(rng, &[n]);
            gradcheck(&[x.clone(), w.clone(), b.clone()], || {
                project(&x.conv1d_depthwise(&w, &b).unwrap(), 20)
            })
        }),
        over_shapes("embed", 21, 6, |rng, m, n| {
            let table = param(rng, &[m + 1, n]);
            let ids = index_list(rng, 2 * m, m + 1);
            gradcheck(std::slice::from_ref(&table), || {
                project(&Tensor::embed(&table, &ids).unwrap(), 21)
            })
        }),
        over_shapes("gather_rows", 22, 6, |rng, m, n| {
            let x = param(rng, &[m, n]);
            let idx = index_list(rng, m + 2, m);
            gradcheck(std::slice::from_ref(&x), || {
                project(&x.gather_rows(&idx).unwrap(), 22)
            })
        }),
        over_shapes("scatter_rows", 23, 6, |rng, m, n| {
            let rows = m + 3;
            let mut idx: Vec<usize> = (0..rows).collect();
            for i in (1..rows).rev() {
                idx.swap(i, index_list(rng, 1, i + 1)[0]);
            }
            idx.truncate(m);
            let x = param(rng, &[m, n]);
            gradcheck(std::slice::from_ref(&x), || {
                project(&x.scatter_rows(&idx, rows).unwrap(), 23)
            })
        }),
        over_shapes("narrow_cols", 24, 6, |rng, m, n| {
            let n = n.max(2);
            let x = param(rng, &[m, n]);
            gradcheck(std::slice::from_ref(&x), || {
                project(&x.narrow_cols(1, n - 1).unwrap(), 24)
            })
        }),
        over_shapes("concat_cols", 25, 6, |rng, m, n| {
            let a = param(rng, &[m, n]);
            let b = param(rng, &[m, n + 1]);
            gradcheck(&[a.clone(), b.clone()], || {
                project(&Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap(), 25)
            })
        }),
        over_shapes("concat_rows", 26, 6, |rng, m, n| {
            let a = param(rng, &[m, n]);
            let b = param(rng, &[m + 1, n]);
            gradcheck(&[a.clone(), b.clone()], || {
                project(&Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap(), 26)
            })
        }),
        unary("reshape", 27, |x| x.reshape(&[x.numel(), 1]).unwrap()),
        over_shapes("mul_scalar_tensor", 28, 6, |rng, m, n| {
            let x = param(rng, &[m, n]);
            let s = param(rng, &[1]);
            gradcheck(&[x.clone(), s.clone()], || {
                project(&x.mul_scalar_tensor(&s).unwrap(), 28)
            })
        }),
        over_shapes("gumbel_softmax_soft", 29, 6, |rng, m, _| {
            let logits = param(rng, &[m, 2]);
            let noise = constant(rng, &[m, 2]).to_vec();
            gradcheck(std::slice::from_ref(&logits), || {
                project(
                    &gumbel_softmax_st_with_noise(&logits, &noise, 0.7, false).unwrap(),
                    29,
                )
            })
        }),
    ]
}

fn utterance_io(cfg: &ctxgate_core::ModelConfig, seed: u64) -> (Tensor, Vec<usize>, Vec<usize>) {
    let task = TaskSpec {
        max_tokens: 3,
        ..TaskSpec::default()
    };
    let utt = generate_dataset(&task, cfg, 1, seed).unwrap().remove(0);
    let mut input = vec![1 + utt.language_id];
    input.extend(&utt.targets);
    let mut output = utt.targets.clone();
    output.push(0);
    (utt.features_tensor(), input, output)
}

/// Dense cross-entropy of the tiny model, checked over every parameter.
pub fn dense_model_loss() -> f64 {
    let cfg = tiny_config();
    let (model, store) = Model::build(&cfg, ParamSource::Random(RngState::new(31))).unwrap();
    let (feats, input, output) = utterance_io(&cfg, 5);
    gradcheck(&store.tensors(), || {
        let enc = model
            .encoder_forward(&feats, &mut NoGating, ExecMode::Dense)
            .unwrap();
        let dec = model
            .decoder_forward(&input, enc.output(), &mut NoGating, ExecMode::Dense)
            .unwrap();
        dec.logits.cross_entropy(&output).unwrap()
    })
}

/// Sparsity loss of a LocalGP system in training mode with fixed Gumbel
/// noise. Hard decisions are piecewise constant, so this checks the soft
/// keep-probability path through the predictors and the model below them.
pub fn local_gate_sparsity_loss() -> f64 {
    let mut config = RunConfig {
        model: tiny_config(),
        gating: GatingKind::Local,
        mode: ExecMode::Temporal,
        context: "front+spk+event".parse::<ContextConfig>().unwrap(),
        ..RunConfig::default()
    };
    config.task.max_tokens = 3;
    let system = System::new(config, ParamSource::Random(RngState::new(41))).unwrap();
    let utt = generate_dataset(&system.config.task, &system.config.model, 1, 9)
        .unwrap()
        .remove(0);
    let rng = RngState::new(77);
    gradcheck(&system.store.tensors(), || {
        let out = system.forward(&utt, true, 1.0, &mut rng.clone()).unwrap();
        sparsity_loss(&[out.gates], 0.5).unwrap().unwrap()
    })
}
