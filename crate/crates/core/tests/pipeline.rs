use cplm_core::analysis::{track_trajectory, Projection};
use cplm_core::attention_bias::{schedule_slope, ScheduleKind, ScheduleSpec};
use cplm_core::eval::{build_report, score_benchmark, ModelScorer, Outcome};
use cplm_core::model::checkpoint::Checkpoint;
use cplm_core::model::{ModelConfig, Pool, Positional};
use cplm_core::synthetic::{generate_corpus, generate_pairs};
use cplm_core::tokenizer::{train_tokenizer, Tokenizer, TokenizerMode};
use cplm_core::trainer::{train, TrainConfig, TrainRunRecord};

fn tiny_model(vocab: usize, positional: Positional) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 24,
        dropout: 0.0,
        positional,
        tied_embeddings: true,
        pool: Pool::Mean,
    }
}

fn tiny_train(epochs: u32) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        grad_accum_steps: 1,
        total_epochs: epochs,
        early_stop_tolerance_epochs: 0,
        seeds: vec![1],
        ..TrainConfig::table6()
    }
}

#[test]
fn train_checkpoint_eval_analyze() {
    let corpus = generate_corpus(3000, 5).unwrap();
    let pairs = generate_pairs(24, 6);
    let tok = train_tokenizer(&corpus, 8192, TokenizerMode::WordLevel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    tok.save(&dir.path().join("tok.json")).unwrap();
    let tok = Tokenizer::load(&dir.path().join("tok.json")).unwrap();

    let spec = ScheduleSpec::new(ScheduleKind::Exponential, 1.0, 0.6, 3).unwrap();
    let cfg = tiny_model(tok.vocab_size(), Positional::None);
    let out = train(&cfg, &spec, &corpus, &tok, &tiny_train(3), 9, dir.path()).unwrap();
    assert_eq!(out.record.epochs.len(), 3);
    assert!(!out.record.stopped_early);

    // The on-disk record matches the returned one.
    let jsonl = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(jsonl, out.record.to_jsonl().unwrap());
    let _: TrainRunRecord = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();

    let ckpts: Vec<Checkpoint> = out
        .record
        .epochs
        .iter()
        .map(|e| Checkpoint::load(&dir.path().join(&e.ckpt)).unwrap())
        .collect();
    for (i, (ck, rec)) in ckpts.iter().zip(&out.record.epochs).enumerate() {
        assert_eq!(ck.epoch as usize, i + 1);
        assert_eq!(ck.train_slope, schedule_slope(&spec, i as u32));
        assert_eq!(ck.schedule_slope_at_save, schedule_slope(&spec, i as u32 + 1));
        assert_eq!(rec.m, ck.train_slope);
        assert!((rec.w - (1.0 - rec.m)).abs() < 1e-15);
    }

    // The final checkpoint is the returned model.
    let last = ckpts.last().unwrap();
    assert_eq!(last.model.params(), out.model.params());

    let slopes = last.inference_slopes();
    let scorer = ModelScorer {
        model: &last.model,
        slopes: &slopes,
    };
    let results = score_benchmark(&scorer, &tok, &pairs).unwrap();
    assert_eq!(results.len(), pairs.len());
    assert!(results.iter().all(|r| r.outcome != Outcome::Skipped));
    let report = build_report(&results, "exp", &[9]).unwrap();
    assert_eq!(report.per_category.values().map(|c| c.n_pairs).sum::<usize>(), 24);

    let traj = track_trajectory(&ckpts, &tok, &pairs, None, Projection::Pca, 0).unwrap();
    assert_eq!(traj.reports.len(), 3);
    assert_eq!(traj.reports.last().unwrap().1.overall, report.overall);
    assert_eq!(traj.table.epochs, vec![1, 2, 3]);
    let space = traj.snapshots[0].space_id;
    assert!(space.is_some() && traj.snapshots.iter().all(|s| s.space_id == space));
    assert!(traj.stats.iter().all(|s| s.entropy.is_finite() && s.entropy >= 0.0));
}

#[test]
fn training_is_deterministic_per_seed() {
    let corpus = generate_corpus(1500, 2).unwrap();
    let tok = train_tokenizer(&corpus, 8192, TokenizerMode::WordLevel).unwrap();
    let spec = ScheduleSpec::new(ScheduleKind::Linear, 1.0, 1.0, 2).unwrap();
    let cfg = tiny_model(tok.vocab_size(), Positional::None);
    let run = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &spec, &corpus, &tok, &tiny_train(2), seed, dir.path()).unwrap();
        (out.record.to_jsonl().unwrap(), std::fs::read(dir.path().join("ckpt/epoch-02.cplm")).unwrap())
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a.1, run(5).1);
}

#[test]
fn biased_schedule_with_learned_positions_is_rejected() {
    let corpus = generate_corpus(500, 1).unwrap();
    let tok = train_tokenizer(&corpus, 8192, TokenizerMode::WordLevel).unwrap();
    let spec = ScheduleSpec::new(ScheduleKind::Static, 1.0, 1.0, 2).unwrap();
    let cfg = tiny_model(tok.vocab_size(), Positional::Learned);
    let dir = tempfile::tempdir().unwrap();
    assert!(train(&cfg, &spec, &corpus, &tok, &tiny_train(1), 1, dir.path()).is_err());
    assert!(!dir.path().join("ckpt").exists());
}
