//! Epoch-based training with AdamW, warmup plus cosine-with-restarts decay,
//! per-epoch schedule updates, checkpoints and early stopping on validation
//! perplexity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_bias::{effective_slopes, head_slopes, schedule_slope, ScheduleSpec};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, NllSum, Real, Transformer};
use crate::optim::{AdamW, AdamWParams};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    CosineWithRestarts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub total_epochs: u32,
    pub warmup_fraction: f64,
    pub lr_schedule: LrSchedule,
    /// Cosine cycles after warmup; 1 is plain cosine decay.
    pub n_restarts: u32,
    pub early_stop_tolerance_epochs: u32,
    pub eval_split_fraction: f64,
    pub seeds: Vec<u64>,
}

impl TrainConfig {
    /// The full-scale optimizer recipe: lr 5e-6, batch 512 with 2
    /// accumulation steps, 20 epochs, 10% warmup.
    pub fn table6() -> Self {
        Self {
            lr: 5e-6,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 512,
            grad_accum_steps: 2,
            total_epochs: 20,
            warmup_fraction: 0.1,
            lr_schedule: LrSchedule::CosineWithRestarts,
            n_restarts: 1,
            early_stop_tolerance_epochs: 1,
            eval_split_fraction: 0.05,
            seeds: vec![1, 2, 3],
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("lr must be positive (got {})", self.lr));
        }
        if self.weight_decay < 0.0 {
            p.push("weight_decay must be non-negative".to_owned());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            p.push("betas must lie in [0,1)".to_owned());
        }
        if self.eps <= 0.0 {
            p.push("eps must be positive".to_owned());
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            p.push("batch_size and grad_accum_steps must be positive".to_owned());
        }
        if self.total_epochs < 1 {
            p.push("total_epochs must be at least 1".to_owned());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            p.push(format!("warmup_fraction {} outside [0,1)", self.warmup_fraction));
        }
        if self.n_restarts < 1 {
            p.push("n_restarts must be at least 1".to_owned());
        }
        if !(self.eval_split_fraction > 0.0 && self.eval_split_fraction < 0.5) {
            p.push(format!(
                "eval_split_fraction {} outside (0,0.5)",
                self.eval_split_fraction
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams {
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }
}

pub fn warmup_steps(cfg: &TrainConfig, total_steps: u64) -> u64 {
    (cfg.warmup_fraction * total_steps as f64).ceil() as u64
}

/// Linear warmup from 0 to `lr`, then `n_restarts` hard-restart cosine
/// cycles decaying to 0 at `total_steps`.
pub fn lr_at_step(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    let warmup = warmup_steps(cfg, total_steps);
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    let cycle = (f64::from(cfg.n_restarts) * progress).fract();
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * cycle).cos())
}

/// 64-bit FNV-1a.
fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic held-out split by hash of the sentence text. Guarantees at
/// least one validation sentence when the corpus has two or more.
pub fn split_validation(corpus: &Corpus, fraction: f64) -> (Corpus, Corpus) {
    let cut = (fraction * 10_000.0).round() as u64;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut smallest: Option<(u64, usize)> = None;
    for s in corpus.sentences() {
        let h = fnv1a(&s.join(" "));
        if h % 10_000 < cut {
            val.push(s.clone());
        } else {
            if smallest.is_none_or(|(sh, _)| h % 10_000 < sh) {
                smallest = Some((h % 10_000, train.len()));
            }
            train.push(s.clone());
        }
    }
    if val.is_empty() && train.len() >= 2 {
        let (_, idx) = smallest.unwrap();
        val.push(train.remove(idx));
    }
    (
        Corpus::from_sentences(format!("{}:train", corpus.source_name()), train),
        Corpus::from_sentences(format!("{}:val", corpus.source_name()), val),
    )
}

/// `<bos> words <eos>` truncated on the right to `max_len`.
pub fn encode_for_training(tok: &Tokenizer, corpus: &Corpus, max_len: usize) -> Vec<Vec<u32>> {
    corpus
        .sentences()
        .iter()
        .map(|s| {
            let mut ids = tok.encode_sentence(s);
            ids.truncate(max_len);
            ids
        })
        .collect()
}

pub fn perplexity_from_nll(sum: NllSum) -> f64 {
    sum.mean().exp()
}

/// `exp` of the mean next-token cross-entropy over the held-out sentences.
pub fn perplexity<F: Real>(model: &Transformer<F>, tok: &Tokenizer, held_out: &Corpus, slopes: &[F]) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::Contract("empty held-out set".into()));
    }
    let seqs = encode_for_training(tok, held_out, model.config().max_seq_len);
    Ok(perplexity_from_nll(model.nll(&seqs, slopes)?))
}

/// Stops once validation perplexity has failed to improve on the best value
/// for `tolerance` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    tolerance: u32,
    best: f64,
    misses: u32,
}

impl EarlyStopper {
    pub fn new(tolerance: u32) -> Self {
        Self {
            tolerance,
            best: f64::INFINITY,
            misses: 0,
        }
    }

    /// Feeds one epoch's perplexity; returns true when training should stop.
    pub fn observe(&mut self, ppl: f64) -> bool {
        if ppl < self.best {
            self.best = ppl;
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        self.tolerance > 0 && self.misses >= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u32,
    pub train_loss: f64,
    pub val_ppl: f64,
    /// Schedule slope active during this epoch.
    pub m: f64,
    pub w: f64,
    /// Learning rate of the last optimizer step in the epoch.
    pub lr: f64,
    /// Checkpoint path relative to the run directory.
    pub ckpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub seed: u64,
    pub stopped_early: bool,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRunRecord {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(out, "{}", serde_json::to_string(e)?);
        }
        Ok(out)
    }
}

/// Sums NLL gradients over `micro_batches`, normalizes by the total target
/// count and applies one optimizer update.
pub fn optimizer_step<F: Real>(
    model: &mut Transformer<F>,
    opt: &mut AdamW<F>,
    micro_batches: &[&[Vec<u32>]],
    slopes: &[F],
    dropout_seeds: &[Option<u64>],
    lr: f64,
) -> Result<NllSum> {
    let mut grads = vec![F::zero(); model.layout().total()];
    let mut total = NllSum::default();
    for (mb, seed) in micro_batches.iter().zip(dropout_seeds) {
        let s = model.accumulate_gradients(mb, slopes, *seed, &mut grads)?;
        total.nll += s.nll;
        total.targets += s.targets;
    }
    if total.targets > 0 {
        let inv = F::one() / F::from_usize(total.targets).unwrap();
        grads.iter_mut().for_each(|g| *g = *g * inv);
        opt.step(model.params_mut(), &grads, lr);
    }
    Ok(total)
}

fn rng_state(rng: &ChaCha8Rng) -> String {
    let mut s: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let _ = write!(s, ":{:x}:{:x}", rng.get_stream(), rng.get_word_pos());
    s
}

pub struct TrainOutput {
    pub record: TrainRunRecord,
    pub model: Transformer<f32>,
}

/// Per-head slopes for epoch `t` as model floats.
pub fn slopes_for_epoch(spec: &ScheduleSpec, n_heads: usize, epoch: u32) -> Result<Vec<f32>> {
    let base = head_slopes(n_heads)?;
    Ok(effective_slopes(spec, &base, epoch)
        .into_iter()
        .map(|s| s as f32)
        .collect())
}

/// Trains one model. Checkpoints go to `out_dir/ckpt/epoch-XX.cplm` and the
/// per-epoch record to `out_dir/train.jsonl`.
///
/// Epochs are 0-indexed for the schedule: epoch `t` trains with `m_t`, and
/// the checkpoint written after it stores `m_{t+1}`, the value the schedule
/// advances to at that boundary.
pub fn train(
    model_config: &ModelConfig,
    schedule: &ScheduleSpec,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutput> {
    cfg.validate()?;
    schedule.validate()?;
    model_config.validate()?;
    if schedule.kind.has_bias() && model_config.positional != crate::model::Positional::None {
        return Err(Error::Config(
            "a distance-penalty schedule requires positional = none".into(),
        ));
    }
    if model_config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} != tokenizer vocabulary {}",
            model_config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let ckpt_dir = out_dir.join("ckpt");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let (train_c, val_c) = split_validation(corpus, cfg.eval_split_fraction);
    if train_c.is_empty() || val_c.is_empty() {
        return Err(Error::Config("corpus too small for a train/validation split".into()));
    }
    let max_len = model_config.max_seq_len;
    let mut train_seqs = encode_for_training(tokenizer, &train_c, max_len);
    train_seqs.retain(|s| s.len() >= 2);
    let val_seqs = encode_for_training(tokenizer, &val_c, max_len);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Transformer::<f32>::new(model_config.clone(), seed)?;
    let mut opt = AdamW::new(model.layout(), cfg.adamw());

    let per_step = cfg.batch_size * cfg.grad_accum_steps;
    let steps_per_epoch = train_seqs.len().div_ceil(per_step) as u64;
    let total_steps = steps_per_epoch * u64::from(cfg.total_epochs);
    let mut step: u64 = 0;
    let mut stopper = EarlyStopper::new(cfg.early_stop_tolerance_epochs);
    let mut record = TrainRunRecord {
        seed,
        stopped_early: false,
        epochs: Vec::new(),
    };

    for t in 0..cfg.total_epochs {
        let m_t = if schedule.kind.has_bias() {
            schedule_slope(schedule, t)
        } else {
            0.0
        };
        let slopes = slopes_for_epoch(schedule, model_config.n_heads, t)?;
        train_seqs.shuffle(&mut rng);

        let mut epoch_sum = NllSum::default();
        let mut last_lr = 0.0;
        for group in train_seqs.chunks(per_step) {
            let micro: Vec<&[Vec<u32>]> = group.chunks(cfg.batch_size).collect();
            let seeds: Vec<Option<u64>> = micro.iter().map(|_| Some(rng.gen())).collect();
            let lr = lr_at_step(cfg, step, total_steps);
            let s = optimizer_step(&mut model, &mut opt, &micro, &slopes, &seeds, lr).map_err(|e| match e {
                Error::Numerical { context } => Error::Numerical {
                    context: format!("epoch {}, step {step}: {context}", t + 1),
                },
                other => other,
            })?;
            if !s.nll.is_finite() {
                return Err(Error::Numerical {
                    context: format!("epoch {}, step {step}", t + 1),
                });
            }
            epoch_sum.nll += s.nll;
            epoch_sum.targets += s.targets;
            last_lr = lr;
            step += 1;
        }

        let val_ppl = perplexity_from_nll(model.nll(&val_seqs, &slopes)?);
        let saved_slope = if schedule.kind.has_bias() {
            schedule_slope(schedule, t + 1)
        } else {
            0.0
        };
        let ckpt_rel = format!("ckpt/epoch-{:02}.cplm", t + 1);
        let ckpt_path: PathBuf = out_dir.join(&ckpt_rel);
        Checkpoint {
            epoch: t + 1,
            schedule: *schedule,
            schedule_slope_at_save: saved_slope,
            train_slope: m_t,
            rng_state: rng_state(&rng),
            model: model.clone(),
        }
        .save(&ckpt_path)?;

        log::info!(
            "seed {seed} epoch {}: train_loss {:.4} val_ppl {:.3} m {:.6}",
            t + 1,
            epoch_sum.mean(),
            val_ppl,
            m_t
        );
        record.epochs.push(EpochRecord {
            epoch: t + 1,
            train_loss: epoch_sum.mean(),
            val_ppl,
            m: m_t,
            w: 1.0 - m_t,
            lr: last_lr,
            ckpt: ckpt_rel,
        });
        let jsonl = out_dir.join("train.jsonl");
        std::fs::write(&jsonl, record.to_jsonl()?).map_err(|e| Error::io(&jsonl, e))?;

        if stopper.observe(val_ppl) {
            record.stopped_early = t + 1 < cfg.total_epochs;
            break;
        }
    }
    let run = out_dir.join("run.json");
    std::fs::write(&run, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&run, e))?;
    Ok(TrainOutput { record, model })
}
