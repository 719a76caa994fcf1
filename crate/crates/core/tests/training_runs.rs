// SPDX-License-Identifier: MIT OR Apache-2.0

//! Short training runs on a tiny model.

use fencebench_core::checkpoint;
use fencebench_core::corpus::{generate_corpus, CorpusConfig, Lexicon, Vocab};
use fencebench_core::fence::{calibrate_targets, FenceConfig, DEFAULT_FEATURES};
use fencebench_core::model::{Model, ModelConfig};
use fencebench_core::training::{encode_corpus, Mode, Sequence, Stage, TrainSchedule, Trainer, CHECKPOINT_NAME};

struct Setup {
    model: Model,
    fence: FenceConfig,
    train: Vec<Sequence>,
    eval: Vec<Sequence>,
    vocab: Vec<String>,
}

fn setup() -> Setup {
    let examples = generate_corpus(
        &Lexicon::default(),
        &CorpusConfig {
            n_examples: 80,
            seed: 5,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let vocab = Vocab::from_corpus(&examples);
    let model = Model::new(ModelConfig {
        n_layers: 2,
        hidden_dim: 32,
        n_heads: 2,
        vocab_size: vocab.len(),
        max_context: 96,
        ff_mult: 2,
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    let names: Vec<&str> = DEFAULT_FEATURES.iter().map(|(n, _)| *n).collect();
    let mut fence = FenceConfig::spread(32, &names, 5, &["finance"]).unwrap();
    let plain = encode_corpus(&examples, &vocab, None, 96).unwrap();
    let batch: Vec<Vec<usize>> = plain.iter().map(|s| s.ids.clone()).collect();
    fence.targets = calibrate_targets(&model, &batch, 1.0).unwrap();
    let seqs = encode_corpus(&examples, &vocab, Some(&fence), 96).unwrap();
    Setup {
        model,
        fence,
        train: seqs[..64].to_vec(),
        eval: seqs[64..].to_vec(),
        vocab: vocab.words().to_vec(),
    }
}

fn schedule(stage1: u64, ramp: u64, total: u64) -> TrainSchedule {
    TrainSchedule {
        stage1_steps: stage1,
        ramp_steps: ramp,
        total_steps: total,
        lr: 1e-3,
        batch_size: 4,
        seed: 9,
        checkpoint_every: 0,
        eval_every: 10,
        ..TrainSchedule::default()
    }
}

fn bits(m: &Model) -> Vec<u32> {
    m.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn smoke_run_writes_one_checkpoint() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(s.model, Some(s.fence), schedule(20, 10, 50), &s.train, &s.eval, s.vocab)
        .unwrap()
        .with_checkpoint_dir(dir.path());
    t.run().unwrap();
    assert_eq!(t.step(), 50);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 1);
    let ck = checkpoint::load(&dir.path().join(CHECKPOINT_NAME)).unwrap();
    assert_eq!(ck.header.step, 50);
    assert!(ck.optimizer.is_some());
    let train_records = t.metrics().records().iter().filter(|r| r.mode == Mode::Train).count();
    assert_eq!(train_records, 50);
}

#[test]
fn stage_one_only_keeps_position_loss_out() {
    let s = setup();
    let mut t = Trainer::new(s.model, Some(s.fence), schedule(30, 0, 30), &s.train, &s.eval, s.vocab).unwrap();
    t.run().unwrap();
    for r in t.metrics().records() {
        if r.step < 30 {
            assert_eq!(r.stage, Stage::Injection);
            assert_eq!(r.lambda, 0.0);
            let p = r.position_loss.unwrap();
            assert!(p.abs() < 1e-6, "injected position loss {p} at step {}", r.step);
        }
    }
}

#[test]
fn resume_reproduces_the_trajectory() {
    let sched = schedule(10, 10, 40);

    let s = setup();
    let mut straight = Trainer::new(s.model, Some(s.fence), sched.clone(), &s.train, &s.eval, s.vocab).unwrap();
    straight.run().unwrap();

    let s2 = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_NAME);
    let mut first = Trainer::new(s2.model, Some(s2.fence), sched.clone(), &s2.train, &s2.eval, s2.vocab).unwrap();
    first.run_until(17).unwrap();
    first.save_checkpoint(&path).unwrap();
    let early: Vec<_> = first.metrics().records().to_vec();
    drop(first);

    let mut resumed = Trainer::resume(checkpoint::load(&path).unwrap(), sched, &s2.train, &s2.eval).unwrap();
    assert_eq!(resumed.step(), 17);
    resumed.run().unwrap();

    assert_eq!(bits(straight.model()), bits(resumed.model()));
    let mut joined = early;
    joined.extend(resumed.metrics().records().iter().cloned());
    // the resumed run re-evaluates at its starting step; drop duplicates
    joined.dedup_by(|a, b| a.step == b.step && a.mode == b.mode);
    assert_eq!(straight.metrics().records(), &joined[..]);
}

#[test]
fn resume_rejects_a_different_schedule() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_NAME);
    let mut t = Trainer::new(s.model, Some(s.fence), schedule(5, 5, 20), &s.train, &s.eval, s.vocab).unwrap();
    t.run_until(3).unwrap();
    t.save_checkpoint(&path).unwrap();
    assert!(Trainer::resume(checkpoint::load(&path).unwrap(), schedule(5, 5, 30), &s.train, &s.eval).is_err());
}

#[test]
fn golden_logits() {
    let m = Model::new(ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        vocab_size: 11,
        max_context: 8,
        ff_mult: 2,
        seed: 42,
        ..ModelConfig::default()
    })
    .unwrap();
    let out = m.forward(&[1, 5, 2, 9, 3], None).unwrap();
    let row: Vec<f32> = out.logits.row(4)[..4].to_vec();
    let sum: f64 = out.logits.data().iter().map(|&v| f64::from(v)).sum();
    let want_row = GOLDEN_ROW;
    for (g, w) in row.iter().zip(want_row) {
        assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-3), "{g} vs {w}");
    }
    assert!((sum - GOLDEN_SUM).abs() <= 1e-6 * GOLDEN_SUM.abs().max(1e-3), "{sum} vs {GOLDEN_SUM}");
}

// recorded on the first build
const GOLDEN_ROW: [f32; 4] = [-0.07222266, 0.08568505, -0.04463458, 0.10387024];
const GOLDEN_SUM: f64 = 2.8747761133126915e-1;
