mod common;

use ctxgate_core::gates::NoGating;
use ctxgate_core::model::params::{ParamSource, ParamStore};
use ctxgate_core::train::{generate_dataset, run_training, RunConfig, TaskSpec, EOS};
use ctxgate_core::{ExecMode, GateSet, Model, RngState};

use common::tiny_config;

fn small_task() -> TaskSpec {
    TaskSpec {
        max_tokens: 3,
        ..TaskSpec::default()
    }
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let cfg = tiny_config();
    let (model, store) = Model::build(&cfg, ParamSource::Random(RngState::new(1))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    store.save(&path).unwrap();

    let (other, other_store) = Model::build(&cfg, ParamSource::Random(RngState::new(2))).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    assert_eq!(other_store.copy_matching(&loaded), store.tensors().len());

    let utt = generate_dataset(&small_task(), &cfg, 1, 3)
        .unwrap()
        .remove(0);
    let logits = |m: &Model| {
        let enc = m
            .encoder_forward(&utt.features_tensor(), &mut NoGating, ExecMode::Dense)
            .unwrap();
        m.decoder_forward(&[1, 5, 6], enc.output(), &mut NoGating, ExecMode::Dense)
            .unwrap()
            .logits
            .to_vec()
    };
    assert_eq!(logits(&model), logits(&other));
}

#[test]
fn pruning_everything_leaves_the_residual_path() {
    let cfg = tiny_config();
    let (model, _) = Model::build(&cfg, ParamSource::Random(RngState::new(4))).unwrap();
    let utt = generate_dataset(&small_task(), &cfg, 1, 5)
        .unwrap()
        .remove(0);
    let feats = utt.features_tensor();
    let gates = GateSet::uniform(
        ExecMode::Temporal,
        (cfg.n_enc_layers, utt.frames),
        (cfg.n_dec_layers, 1),
        false,
    );
    let enc = model
        .encoder_forward(
            &feats,
            &mut ctxgate_core::gates::FixedGates(&gates),
            ExecMode::Temporal,
        )
        .unwrap();
    let x0 = model.frontend_forward(&feats).unwrap().to_vec();
    // Only the merge projection of two zero branches remains, which is zero.
    assert_eq!(enc.output().to_vec(), x0);
}

#[test]
fn greedy_decode_recovers_memorised_targets() {
    let mut config = RunConfig::default();
    config.train.train_size = 4;
    config.train.eval_size = 1;
    config.train.warmup_steps = 50;
    config.train.steps = 400;
    config.train.seed = 7;
    let out = run_training(config.clone(), None, None).unwrap();
    let system = &out.system;
    let train = generate_dataset(&config.task, &config.model, 5, 7).unwrap();
    let mut exact = 0;
    for utt in &train[..4] {
        let enc = system
            .model
            .encoder_forward(&utt.features_tensor(), &mut NoGating, ExecMode::Dense)
            .unwrap();
        let decoded = system
            .model
            .greedy_decode(
                enc.output(),
                &[system.vocab.bos(utt.language_id)],
                EOS,
                utt.targets.len() + 4,
                &mut NoGating,
                ExecMode::Dense,
            )
            .unwrap();
        exact += usize::from(decoded == utt.targets);
    }
    assert!(
        exact >= 3,
        "{exact} of 4 training utterances decoded exactly"
    );
}
