use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::optim::{Optimizer, OptimizerKind};
use super::synth::{synth_task, SynthConfig};
use super::train::{
    nbest_sequences, score_nbest, train, utterance_gradient, LossKind, TrainConfig,
};
use super::*;
use crate::gradcheck::{max_relative_error, DEFAULT_EPSILON};
use crate::lattice::{forward, nll_loss, Head, HeadConfig};
use crate::mwer::mwer_loss;

fn dims(vocab_size: usize) -> ModelDims {
    ModelDims {
        input: synth::feature_dim(vocab_size),
        encoder_hidden: 4,
        predictor_hidden: 4,
        embedding: 3,
        vocab_size,
    }
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    FeatureSequence::new(Array2::from_shape_simple_fn((frames, dim), || {
        rng.random_range(-1.0..1.0)
    }))
    .unwrap()
}

/// Random parameters including non-zero biases, so every ReLU pattern and
/// tanh slope is exercised.
fn random_params(vocab_size: usize, seed: u64) -> ToyModelParams {
    let mut p = ToyModelParams::init(dims(vocab_size), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for (_, mut t) in p.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    p
}

fn utterance(features: FeatureSequence, labels: Vec<usize>) -> synth::Utterance {
    synth::Utterance {
        id: "u".into(),
        labels: LabelSequence::from_tokens(labels).unwrap(),
        frame_classes: vec![0; features.frames()],
        features,
    }
}

#[test]
fn zero_parameters_give_uniform_lattice() {
    let p = ToyModelParams::zeros(dims(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_features(&mut rng, 5, p.dims().input);
    let labels = LabelSequence::from_tokens(vec![1, 3]).unwrap();
    let lattice = p.forward(&x, &labels).unwrap();
    assert!(lattice.logits().iter().all(|&v| v == 0.0));
    let dist = HeadConfig::rnnt()
        .step_log_probs(&lattice.cell(2, 1).to_vec(), &p.vocab())
        .unwrap();
    for lp in dist {
        assert!((lp - (0.25f64).ln()).abs() < 1e-15);
    }
}

#[test]
fn empty_labels_give_single_state() {
    let p = random_params(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_features(&mut rng, 6, p.dims().input);
    let lattice = p.forward(&x, &LabelSequence::empty()).unwrap();
    assert_eq!(lattice.logits().dim(), (6, 1, 4));
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let bad = ModelDims {
        predictor_hidden: 5,
        ..dims(3)
    };
    assert!(matches!(ToyModelParams::zeros(bad), Err(Error::Config(_))));
    let p = random_params(3, 2);
    let x = FeatureSequence::new(Array2::zeros((3, 2))).unwrap();
    assert!(matches!(
        p.forward(&x, &LabelSequence::empty()),
        Err(Error::Config(_))
    ));
    let out_of_vocab = LabelSequence::from_tokens(vec![4]).unwrap();
    let x = FeatureSequence::new(Array2::zeros((3, p.dims().input))).unwrap();
    assert!(p.forward(&x, &out_of_vocab).is_err());
}

/// Recomputes the lattice with scalar loops over `Vec`s.
fn straight_line_lattice(
    p: &ToyModelParams,
    x: &FeatureSequence,
    labels: &[usize],
) -> Vec<Vec<Vec<f64>>> {
    let h = p.dims().hidden();
    let matvec = |w: &Array2<f64>, v: &[f64]| -> Vec<f64> {
        (0..w.nrows())
            .map(|i| (0..w.ncols()).map(|j| w[[i, j]] * v[j]).sum())
            .collect()
    };
    let mut f = Vec::new();
    let mut prev = vec![0.0; h];
    for t in 0..x.frames() {
        let xt: Vec<f64> = x.view().row(t).to_vec();
        let a = matvec(&p.enc_w_input, &xt);
        let b = matvec(&p.enc_w_hidden, &prev);
        let next: Vec<f64> = (0..h)
            .map(|i| (a[i] + b[i] + p.enc_bias[i]).tanh())
            .collect();
        f.push(next.clone());
        prev = next;
    }
    let mut g = vec![(0..h).map(|i| p.pred_bias[i].tanh()).collect::<Vec<f64>>()];
    for &k in labels {
        let e: Vec<f64> = p.embedding.row(k - 1).to_vec();
        let a = matvec(&p.pred_w_input, &e);
        let b = matvec(&p.pred_w_hidden, g.last().unwrap());
        g.push(
            (0..h)
                .map(|i| (a[i] + b[i] + p.pred_bias[i]).tanh())
                .collect(),
        );
    }
    f.iter()
        .map(|ft| {
            g.iter()
                .map(|gu| {
                    let r: Vec<f64> = (0..h).map(|i| (ft[i] + gu[i]).max(0.0)).collect();
                    let z = matvec(&p.join_weight, &r);
                    z.iter()
                        .zip(p.join_bias.iter())
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn forward_matches_straight_line_recurrences() {
    for seed in 0..5 {
        let p = random_params(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_features(&mut rng, 7, p.dims().input);
        let labels = vec![2, 1, 3, 3];
        let lattice = p
            .forward(&x, &LabelSequence::from_tokens(labels.clone()).unwrap())
            .unwrap();
        let oracle = straight_line_lattice(&p, &x, &labels);
        for (t, row) in oracle.iter().enumerate() {
            for (u, cell) in row.iter().enumerate() {
                for (k, v) in cell.iter().enumerate() {
                    assert!((lattice.logits()[[t, u, k]] - v).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradient() {
    let p = random_params(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_features(&mut rng, 4, p.dims().input);
    let labels = LabelSequence::from_tokens(vec![1, 2]).unwrap();
    let dz = Array3::zeros((4, 3, 4));
    let g = p.backward(&x, &labels, &dz).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
    assert!(p.backward(&x, &labels, &Array3::zeros((4, 2, 4))).is_err());
}

#[test]
fn nll_parameter_gradient_matches_finite_differences() {
    for head in [
        HeadConfig::rnnt(),
        HeadConfig::hat(),
        HeadConfig::hat().with_temperature(1.7),
    ] {
        for seed in 0..3 {
            let p = random_params(3, 10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_features(&mut rng, 4, p.dims().input);
            let labels = LabelSequence::from_tokens(vec![3, 1]).unwrap();
            let loss = |q: &ToyModelParams| {
                nll_loss(&q.forward(&x, &labels).unwrap(), &labels, &head)
                    .unwrap()
                    .loss
            };
            let out = nll_loss(&p.forward(&x, &labels).unwrap(), &labels, &head).unwrap();
            let analytic = p.backward(&x, &labels, &out.grad).unwrap();
            let numeric = numeric_gradient(&p, DEFAULT_EPSILON, loss);
            let err = max_relative_error(&analytic.flatten(), &numeric.flatten());
            assert!(err < 1e-4, "{head:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn mwer_parameter_gradient_matches_finite_differences() {
    for head in [Head::Rnnt, Head::Hat] {
        for (seed, lnp) in [(0, false), (1, true), (2, false)] {
            let p = random_params(3, 20 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let utt = utterance(random_features(&mut rng, 4, p.dims().input), vec![2, 3]);
            let config = TrainConfig {
                loss: LossKind::Mwer,
                head,
                length_normalized_posterior: lnp,
                ..TrainConfig::for_loss(LossKind::Mwer)
            };
            let (seqs, _) = nbest_sequences(&p, &utt, &config).unwrap();
            assert!(seqs.len() > 1);
            let loss = |q: &ToyModelParams| {
                mwer_loss(&score_nbest(q, &utt, &seqs, &config).unwrap().0).loss
            };
            let (_, analytic) = utterance_gradient(&p, &utt, &config).unwrap();
            let numeric = numeric_gradient(&p, DEFAULT_EPSILON, loss);
            let err = max_relative_error(&analytic.flatten(), &numeric.flatten());
            assert!(err < 1e-4, "{head:?} seed {seed}: {err}");
            assert!(analytic.flatten().iter().any(|&v| v.abs() > 1e-6));
        }
    }
}

#[test]
fn unused_embedding_rows_get_no_gradient() {
    let p = random_params(5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_features(&mut rng, 5, p.dims().input);
    let labels = LabelSequence::from_tokens(vec![2, 4, 2]).unwrap();
    let out = nll_loss(
        &p.forward(&x, &labels).unwrap(),
        &labels,
        &HeadConfig::hat(),
    )
    .unwrap();
    let g = p.backward(&x, &labels, &out.grad).unwrap();
    for k in [1, 3, 5] {
        assert!(
            g.embedding.row(k - 1).iter().all(|&v| v == 0.0),
            "label {k}"
        );
    }
    for k in [2, 4] {
        assert!(
            g.embedding.row(k - 1).iter().any(|&v| v != 0.0),
            "label {k}"
        );
    }
}

#[test]
fn same_parameters_serve_both_heads() {
    let p = random_params(3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_features(&mut rng, 6, p.dims().input);
    let labels = LabelSequence::from_tokens(vec![1, 2, 3]).unwrap();
    let lattice = p.forward(&x, &labels).unwrap();
    for head in [HeadConfig::rnnt(), HeadConfig::hat()] {
        let grid = head.grid(&lattice).unwrap();
        for t in 0..6 {
            for u in 0..4 {
                let total: f64 = grid.cell(t, u).probs().iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(forward(&grid, &labels).unwrap().log_likelihood.is_finite());
    }
}

#[test]
fn internal_lm_ignores_acoustics() {
    let p = random_params(3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = ModelScorer::new(&p, &random_features(&mut rng, 5, p.dims().input)).unwrap();
    let b = ModelScorer::new(&p, &random_features(&mut rng, 9, p.dims().input)).unwrap();
    let (mut sa, mut sb) = (a.initial_state(), b.initial_state());
    for k in [3, 1, 1, 2] {
        assert_eq!(a.ilm_logits(&sa), b.ilm_logits(&sb));
        sa = a.advance(&sa, k);
        sb = b.advance(&sb, k);
    }
    assert_ne!(a.joint_logits(0, &sa), b.joint_logits(0, &sb));
    let labels = LabelSequence::from_tokens(vec![3, 1, 1, 2]).unwrap();
    let score = p.internal_lm(&labels).unwrap();
    assert_eq!(score.per_token.len(), 4);
    assert!(score.log_prob < 0.0);
}

#[test]
fn scorer_agrees_with_batch_forward() {
    let p = random_params(3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_features(&mut rng, 5, p.dims().input);
    let labels = [2, 2, 1];
    let lattice = p
        .forward(&x, &LabelSequence::from_tokens(labels.to_vec()).unwrap())
        .unwrap();
    let s = ModelScorer::new(&p, &x).unwrap();
    let mut state = s.initial_state();
    for u in 0..=labels.len() {
        for t in 0..5 {
            let z = s.joint_logits(t, &state);
            for (k, v) in z.iter().enumerate() {
                assert!((lattice.logits()[[t, u, k]] - v).abs() < 1e-12);
            }
        }
        if u < labels.len() {
            state = s.advance(&state, labels[u]);
        }
    }
}

fn tiny_task(seed: u64) -> synth::Dataset {
    let config = SynthConfig {
        num_utts: 12,
        frames: 5..=7,
        labels: 1..=3,
        vocab_size: 3,
        noise_level: 0.3,
        onset_noise: 0.1,
    };
    synth_task(seed, &config).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = tiny_task(0);
    let p = ToyModelParams::init(dims(3), 0).unwrap();
    for (opt, loss) in [
        (OptimizerKind::Adam, LossKind::Nll),
        (OptimizerKind::Sgd, LossKind::Nll),
        (OptimizerKind::Adam, LossKind::Mwer),
    ] {
        let config = TrainConfig {
            learning_rate: 0.0,
            optimizer: opt,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::for_loss(loss)
        };
        let (trained, metrics) = train(p.clone(), &data, &data, &config).unwrap();
        assert_eq!(trained, p);
        assert_eq!(metrics.len(), 2);
        assert_eq!(metrics[0].loss, metrics[1].loss);
    }
}

#[test]
fn training_is_deterministic() {
    let data = tiny_task(1);
    let p = ToyModelParams::init(dims(3), 1).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let a = train(p.clone(), &data, &data, &config).unwrap();
    let b = train(p.clone(), &data, &data, &config).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_ne!(a.0, p);
    let mwer = TrainConfig {
        epochs: 1,
        ..TrainConfig::for_loss(LossKind::Mwer)
    };
    let c = train(a.0.clone(), &data, &data, &mwer).unwrap();
    let d = train(a.0.clone(), &data, &data, &mwer).unwrap();
    assert_eq!(c, d);
}

#[test]
fn invalid_training_config_is_rejected() {
    let p = ToyModelParams::init(dims(3), 0).unwrap();
    for config in [
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            mwer_beam: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(train::Trainer::new(p.clone(), config).is_err());
    }
}

#[test]
fn divergence_is_reported() {
    let data = tiny_task(2);
    let mut p = ToyModelParams::init(dims(3), 2).unwrap();
    p.join_bias[0] = 1e308;
    let config = TrainConfig {
        epochs: 1,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e308,
        ..TrainConfig::default()
    };
    assert!(train(p, &data, &data, &config).is_err());
}

#[test]
fn synthetic_task_is_deterministic() {
    let config = SynthConfig::default();
    assert_eq!(
        synth_task(9, &config).unwrap(),
        synth_task(9, &config).unwrap()
    );
    assert_ne!(
        synth_task(9, &config).unwrap(),
        synth_task(10, &config).unwrap()
    );
}

#[test]
fn noiseless_frames_are_linearly_readable() {
    let config = SynthConfig {
        noise_level: 0.0,
        onset_noise: 0.0,
        ..SynthConfig::default()
    };
    let data = synth_task(3, &config).unwrap();
    let k = config.vocab_size + 1;
    for utt in &data.utterances {
        let x = utt.features.view();
        assert!(utt.labels.len() < utt.features.frames());
        let mut onsets = Vec::new();
        for t in 0..x.nrows() {
            let row = x.row(t);
            let argmax = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, utt.frame_classes[t]);
            if row[k] > 0.5 {
                onsets.push(argmax);
            }
        }
        assert_eq!(onsets, utt.labels.tokens());
    }
}

#[test]
fn invalid_synthetic_ranges_are_rejected() {
    for config in [
        SynthConfig {
            frames: 4..=8,
            labels: 1..=4,
            ..SynthConfig::default()
        },
        SynthConfig {
            frames: 0..=0,
            labels: 0..=0,
            ..SynthConfig::default()
        },
        SynthConfig {
            noise_level: -1.0,
            ..SynthConfig::default()
        },
        SynthConfig {
            onset_noise: f64::NAN,
            ..SynthConfig::default()
        },
        SynthConfig {
            vocab_size: 0,
            ..SynthConfig::default()
        },
    ] {
        assert!(synth_task(0, &config).is_err(), "{config:?}");
    }
}

#[test]
fn dataset_round_trips_through_jsonl() {
    let data = tiny_task(4);
    let mut buf = Vec::new();
    data.write_jsonl(&mut buf).unwrap();
    let back = synth::Dataset::read_jsonl(buf.as_slice(), data.vocab).unwrap();
    assert_eq!(back, data);
    let small = crate::lattice::Vocab::new(1).unwrap();
    assert!(synth::Dataset::read_jsonl(buf.as_slice(), small).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_optimizer_state() {
    let data = tiny_task(5);
    let p = ToyModelParams::init(dims(3), 5).unwrap();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut trainer = train::Trainer::new(p, config.clone()).unwrap();
    trainer.run_epoch(&data, &data).unwrap();
    let ckpt = Checkpoint {
        params: trainer.params().clone(),
        head: config.head_config(),
        seed: 5,
        epoch: trainer.epoch(),
        optimizer: Some(trainer.optimizer().clone()),
        train_config: Some(config.clone()),
    };
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, ckpt);
    assert!(matches!(back.optimizer, Some(Optimizer::Adam(ref m)) if m.step == 2));

    let mut resumed =
        train::Trainer::resume(back.params, back.optimizer.unwrap(), config, back.epoch).unwrap();
    let next = resumed.run_epoch(&data, &data).unwrap();
    let direct = trainer.run_epoch(&data, &data).unwrap();
    assert_eq!(next, direct);
    assert_eq!(resumed.params(), trainer.params());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let p = ToyModelParams::init(dims(3), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::new(p, HeadConfig::hat(), 0)
        .save(dir.path())
        .unwrap();
    assert!(Checkpoint::load(dir.path()).unwrap().optimizer.is_none());
    let bin = dir.path().join(checkpoint::TENSOR_FILE);
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(dir.path()),
        Err(Error::Format(_))
    ));
    bytes[0] = b'X';
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(dir.path()),
        Err(Error::Format(_))
    ));
}
