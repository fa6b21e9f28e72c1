mod common;

use std::fs;

use common::{small_config, synth_examples};
use ensemble_ner::checkpoint::{list_checkpoints, Checkpoint};
use ensemble_ner::corpus::{EntitySpan, LabelSet, Sentence};
use ensemble_ner::embed::EmbeddingMatrix;
use ensemble_ner::model::{Example, Tagger};
use ensemble_ner::synth::model_name;
use ensemble_ner::train::{evaluate, fit, OptimizerKind, OptimizerState, TrainConfig, Trainer};
use ensemble_ner::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn models(k: usize) -> Vec<String> {
    (0..k).map(model_name).collect()
}

fn trainer(train: &[Example], cfg: &TrainConfig) -> Trainer {
    let dims = train[0].inputs.iter().map(|m| m.dim()).collect();
    Trainer::new(LabelSet::default(), models(3), dims, cfg.clone()).unwrap()
}

fn last_bytes(t: &Trainer) -> Vec<u8> {
    t.retained().last().unwrap().to_bytes().unwrap()
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(12, 1), &labels, 8);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            accumulation_steps: 1,
            optimizer,
            ..Default::default()
        };
        let initial = trainer(&train, &cfg).tagger().clone();
        let (fitted, report) = fit(&train, &dev, &labels, &models(3), &cfg, None).unwrap();
        assert_eq!(fitted, initial);
        assert_eq!(report.epochs.len(), 1);
    }
}

#[test]
fn separable_data_is_fit_perfectly() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(80, 3), &labels, 60);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 20,
        seed: 3,
        ..Default::default()
    };
    let mut t = trainer(&train, &cfg);
    let report = t.run(&train, &dev).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|r| r.train_loss).collect();
    for w in losses[..10].windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
    assert_eq!(evaluate(t.tagger(), &train).unwrap().f1, 1.0);
    assert_eq!(report.best_dev_f1, 1.0);
}

#[test]
fn same_seed_same_bytes() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(30, 4), &labels, 20);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let mut a = trainer(&train, &cfg);
    let mut b = trainer(&train, &cfg);
    a.run(&train, &dev).unwrap();
    b.run(&train, &dev).unwrap();
    assert_eq!(last_bytes(&a), last_bytes(&b));

    let mut c = trainer(&train, &TrainConfig { seed: 10, ..cfg });
    c.run(&train, &dev).unwrap();
    assert_ne!(last_bytes(&a), last_bytes(&c));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(30, 5), &labels, 22);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let full = TrainConfig {
            learning_rate: 0.01,
            epochs: 6,
            optimizer,
            seed: 2,
            ..Default::default()
        };
        let mut straight = trainer(&train, &full);
        straight.run(&train, &dev).unwrap();

        let mut first = trainer(&train, &TrainConfig { epochs: 3, ..full.clone() });
        first.run(&train, &dev).unwrap();
        let saved = Checkpoint::from_bytes(&last_bytes(&first)).unwrap();
        let mut second = Trainer::resume(saved, full.clone()).unwrap();
        let report = second.run(&train, &dev).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(second.epoch(), 6);
        assert_eq!(last_bytes(&second), last_bytes(&straight), "{optimizer}");
    }
}

#[test]
fn resume_rejects_changed_trajectory() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(10, 6), &labels, 8);
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let mut t = trainer(&train, &cfg);
    t.run(&train, &dev).unwrap();
    let ckpt = t.retained().last().unwrap().clone();
    let changed = TrainConfig {
        learning_rate: 0.5,
        epochs: 2,
        ..cfg
    };
    assert!(matches!(Trainer::resume(ckpt, changed), Err(Error::Config(_))));
}

#[test]
fn rotation_keeps_latest_and_selects_best() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(24, 7), &labels, 16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.003,
        epochs: 9,
        checkpoint_keep: 4,
        ..Default::default()
    };
    let mut t = trainer(&train, &cfg).with_checkpoint_dir(dir.path()).unwrap();
    let report = t.run(&train, &dev).unwrap();
    let on_disk: Vec<usize> = list_checkpoints(dir.path()).unwrap().into_iter().map(|(e, _)| e).collect();
    assert_eq!(on_disk, vec![6, 7, 8, 9]);
    assert_eq!(report.retained_epochs, on_disk);

    let retained: Vec<&_> = report.epochs.iter().filter(|r| r.epoch >= 6).collect();
    let max = retained.iter().map(|r| r.dev_f1).fold(f64::NEG_INFINITY, f64::max);
    let earliest = retained.iter().find(|r| r.dev_f1 == max).unwrap().epoch;
    assert_eq!(report.best_epoch, earliest);
    assert_eq!(t.best().unwrap().epoch, earliest);

    for (epoch, path) in list_checkpoints(dir.path()).unwrap() {
        let c = Checkpoint::load(&path).unwrap();
        assert_eq!(c.epoch, epoch);
        assert_eq!(c.dev_f1, report.epochs[epoch - 1].dev_f1);
    }
}

#[test]
fn keep_one_leaves_single_file() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(8, 8), &labels, 6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_keep: 1,
        ..Default::default()
    };
    let mut t = trainer(&train, &cfg).with_checkpoint_dir(dir.path()).unwrap();
    t.run(&train, &dev).unwrap();
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    assert_eq!(t.best().unwrap().epoch, 3);
}

#[test]
fn accumulated_step_equals_averaged_gradient_step() {
    let labels = LabelSet::default();
    let (train, _) = synth_examples(&small_config(4, 9), &labels, 4);
    let lr = 0.05;
    let cfg = TrainConfig {
        learning_rate: lr,
        optimizer: OptimizerKind::Sgd,
        ..Default::default()
    };
    let mut t = trainer(&train, &cfg);
    let before = t.tagger().clone();

    let mut expected = before.clone();
    let mut grads = before.zero_gradients();
    for ex in &train {
        before.accumulate(ex, &mut grads).unwrap();
    }
    for (p, g) in expected.blocks_mut().into_iter().zip(grads.blocks()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= lr * d / train.len() as f64;
        }
    }
    let window: Vec<&Example> = train.iter().collect();
    t.apply_window(&window).unwrap();
    for ((_, a), (_, b)) in t.tagger().blocks().into_iter().zip(expected.blocks()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

#[test]
fn accumulation_steps_and_batch_size_share_windows() {
    // batch 2 × accumulation 2 and batch 1 × accumulation 4 both update on windows of 4
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(14, 10), &labels, 10);
    let a_cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 2,
        ..Default::default()
    };
    let b_cfg = TrainConfig {
        batch_size: 2,
        accumulation_steps: 2,
        ..a_cfg.clone()
    };
    let mut a = trainer(&train, &a_cfg);
    let mut b = trainer(&train, &b_cfg);
    a.run(&train, &dev).unwrap();
    b.run(&train, &dev).unwrap();
    assert_eq!(a.tagger(), b.tagger());
}

#[test]
fn partial_final_window_still_updates() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(12, 11), &labels, 10);
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let mut t = trainer(&train, &cfg);
    t.run(&train, &dev).unwrap();
    // 10 sentences in windows of 4 → 3 steps per epoch
    match &t.retained().last().unwrap().optimizer {
        OptimizerState::Adam { step, .. } => assert_eq!(*step, 6),
        other => panic!("unexpected optimizer state {other:?}"),
    }
}

/// Two encoders with different widths, forcing the projection path.
fn mixed_width_examples(n: usize, rng: &mut impl Rng) -> Vec<Example> {
    let labels = LabelSet::new(["A"]).unwrap();
    let protos: Vec<Vec<f32>> = (0..3).map(|t| (0..5).map(|j| if j == t { 2.0 } else { 0.0 }).collect()).collect();
    (0..n)
        .map(|i| {
            let len = rng.random_range(3..7);
            let start = rng.random_range(0..len - 1);
            let end = rng.random_range(start + 1..=len);
            let sentence = Sentence {
                id: format!("m{i}"),
                words: (0..len).map(|w| format!("w{w}")).collect(),
                spans: vec![EntitySpan::new("A", start, end)],
                domain: None,
            };
            let tags: Vec<usize> = (0..len)
                .map(|w| if w == start { 1 } else if w > start && w < end { 2 } else { 0 })
                .collect();
            let a: Vec<f32> = tags.iter().flat_map(|&t| protos[t].clone()).collect();
            let b: Vec<f32> = tags.iter().flat_map(|&t| protos[t][..3].to_vec()).collect();
            let inputs = vec![
                EmbeddingMatrix::new(len, 5, a).unwrap(),
                EmbeddingMatrix::new(len, 3, b).unwrap(),
            ];
            Example::new(sentence, inputs, &labels).unwrap()
        })
        .collect()
}

#[test]
fn projection_trains_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let train = mixed_width_examples(30, &mut rng);
    let dev = mixed_width_examples(10, &mut rng);
    let labels = LabelSet::new(["A"]).unwrap();
    let models = vec!["wide".to_string(), "narrow".to_string()];
    let no_projection = TrainConfig::default();
    assert!(Trainer::new(labels.clone(), models.clone(), vec![5, 3], no_projection).is_err());

    let cfg = TrainConfig {
        learning_rate: 0.02,
        epochs: 15,
        projection_dim: Some(4),
        ..Default::default()
    };
    let mut t = Trainer::new(labels, models, vec![5, 3], cfg).unwrap();
    let report = t.run(&train, &dev).unwrap();
    assert!(report.epochs.last().unwrap().train_loss < report.epochs[0].train_loss);
    assert!(report.best_dev_f1 > 0.9, "{}", report.best_dev_f1);
    let ckpt = t.best().unwrap();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(&back, ckpt);
    assert_eq!(back.tagger.projections.len(), 2);
}

#[test]
fn constrained_decoding_never_emits_dangling_inside() {
    let labels = LabelSet::default();
    let (train, dev) = synth_examples(&small_config(20, 13), &labels, 10);
    let cfg = TrainConfig {
        epochs: 1,
        constrained: true,
        ..Default::default()
    };
    let t = trainer(&train, &cfg);
    // untrained weights produce arbitrary paths; the mask must still hold
    for ex in train.iter().chain(&dev) {
        assert!(t.tagger().decode(ex).unwrap().path.is_valid_bio(&labels));
    }
    let unconstrained = Tagger {
        constrained: false,
        ..t.tagger().clone()
    };
    assert!(train
        .iter()
        .chain(&dev)
        .any(|ex| !unconstrained.decode(ex).unwrap().path.is_valid_bio(&labels)));
}

#[test]
fn config_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("c.toml");
    fs::write(&toml, "learning_rate = 0.001\noptimizer = \"sgd\"\npooling = \"first\"\n").unwrap();
    let json = dir.path().join("c.json");
    fs::write(&json, r#"{"learning_rate": 0.001, "optimizer": "sgd", "pooling": "first"}"#).unwrap();
    let a = TrainConfig::from_file(&toml).unwrap();
    let b = TrainConfig::from_file(&json).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.epochs, 50);
    fs::write(&json, r#"{"learning_rate": 0.001, "lr_decay": 0.5}"#).unwrap();
    assert!(TrainConfig::from_file(&json).is_err());
}
