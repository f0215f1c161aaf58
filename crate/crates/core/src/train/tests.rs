use super::checkpoint::{decode, encode};
use super::*;
use crate::data::{build_examples, build_vocab, generate_toy_corpus};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

fn tiny_config(vocab: usize, copy: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        d_model: 8,
        dropout: 0.1,
        vocab_size: vocab,
        max_positions: 96,
        copy,
        ..ModelConfig::default()
    }
}

fn fixture(n_dialogues: usize) -> (Vocab, Vec<Example>) {
    let toy = generate_toy_corpus(1, n_dialogues).unwrap();
    let vocab = build_vocab(&toy.corpus, Some(&toy.ontology), 1);
    let ex = build_examples(&toy.corpus, &vocab, &toy.db, &toy.ontology, 96).unwrap();
    (vocab, ex)
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        epochs: 2,
        warmup_steps: 100,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn uniform_model_loss_is_two_log_v() {
    let (vocab, ex) = fixture(1);
    let mut model = Model::new(tiny_config(vocab.len(), false), 0).unwrap();
    for kind in [crate::model::DecoderKind::Bspan, crate::model::DecoderKind::Response] {
        let (w, b) = model.output_params(kind);
        let ws = model.params().get(w).shape().to_vec();
        model.params_mut().set(w, Tensor::zeros(&ws)).unwrap();
        model.params_mut().set(b, Tensor::zeros(&[vocab.len()])).unwrap();
    }
    let batch: Vec<&Example> = ex.iter().take(2).collect();
    let loss = turn_loss(&model, &vocab, &batch, LossWeights::default()).unwrap();
    let expected = 2.0 * (vocab.len() as f64).ln();
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
}

#[test]
fn loss_is_permutation_invariant() {
    let (vocab, ex) = fixture(2);
    let model = Model::new(tiny_config(vocab.len(), true), 1).unwrap();
    let forward: Vec<&Example> = ex.iter().collect();
    let backward: Vec<&Example> = ex.iter().rev().collect();
    let a = turn_loss(&model, &vocab, &forward, LossWeights::default()).unwrap();
    let b = turn_loss(&model, &vocab, &backward, LossWeights::default()).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let (vocab, ex) = fixture(2);
    let model = Model::new(tiny_config(vocab.len(), true), 2).unwrap();
    let batch: Vec<&Example> = ex.iter().collect();
    let d = Some(DropoutSeed { seed: 3, step: 1 });
    let a = batch_gradients(&model, &vocab, &batch, LossWeights::default(), d, ExecMode::Sequential).unwrap();
    let b = batch_gradients(&model, &vocab, &batch, LossWeights::default(), d, ExecMode::Parallel).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.grads, b.grads);
}

#[test]
fn small_step_decreases_loss() {
    let (vocab, ex) = fixture(1);
    let model = Model::new(tiny_config(vocab.len(), true), 3).unwrap();
    let config = TrainConfig {
        schedule: LrSchedule::Constant,
        constant_lr: 1e-4,
        batch_size: ex.len(),
        ..train_config()
    };
    let batch: Vec<&Example> = ex.iter().collect();
    let mut t = Trainer::new(model, vocab.clone(), config, ex.clone(), ExecMode::Sequential).unwrap();
    let idx: Vec<usize> = (0..ex.len()).collect();
    let before = turn_loss(t.model(), &vocab, &batch, LossWeights::default()).unwrap();
    // Dropout makes the training loss noisy; compare deterministic losses.
    t.config.grad_clip = 0.0;
    let grads = batch_gradients(t.model(), &vocab, &batch, LossWeights::default(), None, ExecMode::Sequential).unwrap();
    t.adam.step(t.model.params_mut(), &grads.grads, 1e-4, AdamConfig::default()).unwrap();
    let after = turn_loss(t.model(), &vocab, &batch, LossWeights::default()).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert!(t.step(&idx).is_ok());
}

#[test]
fn fifty_steps_reduce_loss() {
    let (vocab, ex) = fixture(1);
    let model = Model::new(tiny_config(vocab.len(), true), 4).unwrap();
    let config = TrainConfig {
        schedule: LrSchedule::Constant,
        constant_lr: 3e-3,
        batch_size: ex.len(),
        ..train_config()
    };
    let batch: Vec<&Example> = ex.iter().collect();
    let before = turn_loss(&model, &vocab, &batch, LossWeights::default()).unwrap();
    let mut t = Trainer::new(model, vocab.clone(), config, ex.clone(), ExecMode::Parallel).unwrap();
    let idx: Vec<usize> = (0..ex.len()).collect();
    for _ in 0..50 {
        t.step(&idx).unwrap();
    }
    let after = turn_loss(t.model(), &vocab, &batch, LossWeights::default()).unwrap();
    assert!(after < 0.7 * before, "{after} vs {before}");
}

#[test]
fn warmup_off_grid_is_rejected() {
    let bad = TrainConfig {
        warmup_steps: 300,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let ok = TrainConfig {
        allow_off_grid: true,
        ..bad
    };
    ok.validate().unwrap();
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
}

fn run(ex: &[Example], vocab: &Vocab, stop: Option<u64>) -> Trainer {
    let model = Model::new(tiny_config(vocab.len(), true), 5).unwrap();
    let mut t = Trainer::new(model, vocab.clone(), train_config(), ex.to_vec(), ExecMode::Parallel).unwrap();
    fit(
        &mut t,
        &FitOptions {
            stop_at_step: stop,
            ..FitOptions::default()
        },
    )
    .unwrap();
    t
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (vocab, ex) = fixture(2);
    let t = run(&ex, &vocab, Some(2));
    let ckpt = t.checkpoint();
    let bytes = encode(&ckpt).unwrap();
    let back = decode(&bytes).unwrap();
    assert_eq!(back, ckpt);
    for ((_, _, a), (_, _, b)) in back.params.iter().zip(ckpt.params.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let sum = save_checkpoint(&path, &ckpt).unwrap();
    let (loaded, sum2) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(sum, sum2);
    assert_eq!(sum.len(), 64);

    let truncated = &bytes[..bytes.len() - 10];
    assert!(matches!(decode(truncated), Err(Error::CorruptCheckpoint(_))));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(matches!(decode(&flipped), Err(Error::CorruptCheckpoint(_))));
    let mut old = bytes.clone();
    old[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode(&old), Err(Error::CheckpointVersion { found: 0, expected: 1 })));
}

#[test]
fn equal_seeds_give_identical_runs_and_resume_is_exact() {
    let (vocab, ex) = fixture(2);
    let full = run(&ex, &vocab, None);
    assert!(full.is_done());
    let again = run(&ex, &vocab, None);
    assert_eq!(encode(&full.checkpoint()).unwrap(), encode(&again.checkpoint()).unwrap());

    // Stop mid-epoch, round-trip through bytes, continue.
    let per_epoch = ex.len().div_ceil(train_config().batch_size) as u64;
    assert!(per_epoch >= 2);
    let stop = per_epoch + 1;
    let partial = run(&ex, &vocab, Some(stop));
    assert_eq!(partial.counters().step, stop);
    assert!(partial.counters().batch_in_epoch > 0);
    let ckpt = decode(&encode(&partial.checkpoint()).unwrap()).unwrap();
    let mut resumed = Trainer::resume(ckpt, ex.clone(), ExecMode::Sequential).unwrap();
    fit(&mut resumed, &FitOptions::default()).unwrap();
    assert_eq!(encode(&resumed.checkpoint()).unwrap(), encode(&full.checkpoint()).unwrap());

    let mut other = train_config();
    other.seed = 12;
    let model = Model::new(tiny_config(vocab.len(), true), 5).unwrap();
    let mut t = Trainer::new(model, vocab.clone(), other, ex.clone(), ExecMode::Parallel).unwrap();
    fit(&mut t, &FitOptions::default()).unwrap();
    assert_ne!(t.model().params(), full.model().params());
}

#[test]
fn fit_writes_metrics_and_checkpoints() {
    let toy = generate_toy_corpus(1, 2).unwrap();
    let vocab = build_vocab(&toy.corpus, Some(&toy.ontology), 1);
    let ex = build_examples(&toy.corpus, &vocab, &toy.db, &toy.ontology, 96).unwrap();
    let model = Model::new(tiny_config(vocab.len(), true), 6).unwrap();
    let mut t = Trainer::new(model, vocab, train_config(), ex, ExecMode::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = fit(
        &mut t,
        &FitOptions {
            dev: Some(DevSet {
                corpus: &toy.corpus,
                db: &toy.db,
                ontology: &toy.ontology,
                options: EvalOptions::default(),
            }),
            out_dir: Some(dir.path().to_path_buf()),
            stop_at_step: None,
        },
    )
    .unwrap();
    assert_eq!(summary.history.len(), 2);
    assert!(summary.history.iter().all(|l| l.dev_bleu.is_some()));
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: MetricsLine = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first.epoch, 1);
    assert!(dir.path().join("last.ckpt").exists());
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn full_model_gradient_check() {
    for copy in [true, false] {
        let checks = gradcheck::model_gradient_check(&tiny_config(0, copy), 7, 6).unwrap();
        assert!(checks.len() > 20);
        let bad: Vec<_> = checks
            .iter()
            .filter(|c| c.max_error > gradcheck::TOLERANCE || c.checked == 0)
            .collect();
        assert!(bad.is_empty(), "copy={copy}: {bad:?}");
    }
}
