//! A small GPT-2 style decoder with an optional per-head additive distance
//! penalty on attention scores.
//!
//! The model is generic over the float type: training runs in `f32`, the
//! gradient checks in `f64`. Parameters live in one flat buffer described by
//! a [`ParamLayout`], which makes the optimizer, checkpoints and gradient
//! reduction plain slice operations.

mod backprop;
pub mod checkpoint;
pub mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backprop::SeqCache;

/// Float types the model runs in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn cst<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("constant representable")
}

/// Sequences per gradient shard. Shards are fixed by batch position, not by
/// thread count, so the reduction order never changes.
const SHARD_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Learned,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub positional: Positional,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub pool: Pool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// 4 layers, 4 heads, 256-dim embeddings, 32-token context.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 256,
            d_ff: 1024,
            vocab_size,
            max_seq_len: 32,
            dropout: 0.1,
            positional: Positional::Learned,
            tied_embeddings: true,
            pool: Pool::Mean,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_layers == 0 {
            p.push("n_layers must be at least 1".to_owned());
        }
        if self.n_heads == 0 {
            p.push("n_heads must be at least 1".to_owned());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            p.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            p.push("d_model and d_ff must be positive".to_owned());
        }
        if self.vocab_size == 0 {
            p.push("vocab_size must be positive".to_owned());
        }
        if self.max_seq_len < 2 {
            p.push("max_seq_len must be at least 2".to_owned());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout {} outside [0,1)", self.dropout));
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Matrix,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Matrix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Names, shapes and offsets of every parameter in the flat buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: Option<usize>,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) lm_head: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| -> usize {
            let len = shape.iter().product();
            let offset = total;
            entries.push(ParamEntry {
                name,
                shape,
                offset,
                len,
                kind,
            });
            total += len;
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d], ParamKind::Embedding);
        let pos_emb = (cfg.positional == Positional::Learned)
            .then(|| push("pos_emb".into(), vec![cfg.max_seq_len, d], ParamKind::Embedding));
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: push(p("ln1.g"), vec![d], ParamKind::NormGain),
                ln1_b: push(p("ln1.b"), vec![d], ParamKind::NormBias),
                w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d], ParamKind::Matrix),
                b_qkv: push(p("attn.b_qkv"), vec![3 * d], ParamKind::Bias),
                w_o: push(p("attn.w_o"), vec![d, d], ParamKind::Matrix),
                b_o: push(p("attn.b_o"), vec![d], ParamKind::Bias),
                ln2_g: push(p("ln2.g"), vec![d], ParamKind::NormGain),
                ln2_b: push(p("ln2.b"), vec![d], ParamKind::NormBias),
                w_fc: push(p("mlp.w_fc"), vec![d, ff], ParamKind::Matrix),
                b_fc: push(p("mlp.b_fc"), vec![ff], ParamKind::Bias),
                w_proj: push(p("mlp.w_proj"), vec![ff, d], ParamKind::Matrix),
                b_proj: push(p("mlp.b_proj"), vec![d], ParamKind::Bias),
            });
        }
        let lnf_g = push("ln_f.g".into(), vec![d], ParamKind::NormGain);
        let lnf_b = push("ln_f.b".into(), vec![d], ParamKind::NormBias);
        let lm_head = if cfg.tied_embeddings {
            tok_emb
        } else {
            push("lm_head".into(), vec![v, d], ParamKind::Matrix)
        };
        Self {
            entries,
            total,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Next-token logits, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Logits<F> {
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Summed negative log-likelihood and the number of predicted targets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NllSum {
    pub nll: f64,
    pub targets: usize,
}

impl NllSum {
    pub fn mean(&self) -> f64 {
        self.nll / self.targets as f64
    }

    fn merge(self, o: NllSum) -> NllSum {
        NllSum {
            nll: self.nll + o.nll,
            targets: self.targets + o.targets,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<F>,
}

impl<F: Real> Transformer<F> {
    /// Normal(0, 0.02) matrices and embeddings, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        let mut params = vec![F::zero(); layout.total()];
        for e in layout.entries() {
            let slot = &mut params[e.offset..e.offset + e.len];
            match e.kind {
                ParamKind::Embedding | ParamKind::Matrix => {
                    for p in slot {
                        *p = cst(normal.sample(&mut rng));
                    }
                }
                ParamKind::NormGain => slot.fill(F::one()),
                ParamKind::Bias | ParamKind::NormBias => {}
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[F]> {
        self.layout
            .entry(name)
            .map(|e| &self.params[e.offset..e.offset + e.len])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let e = self.layout.entry(name)?.clone();
        Some(&mut self.params[e.offset..e.offset + e.len])
    }

    pub fn cast<G: Real>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| G::from_f64(p.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_slopes(&self, slopes: &[F]) -> Result<()> {
        if !slopes.is_empty() && slopes.len() != self.config.n_heads {
            return Err(Error::Contract(format!(
                "{} slopes given for {} heads",
                slopes.len(),
                self.config.n_heads
            )));
        }
        Ok(())
    }

    /// Inference-mode logits. `slopes` holds one effective slope per head,
    /// or is empty for no distance penalty.
    pub fn forward(&self, ids: &[u32], slopes: &[F]) -> Result<Logits<F>> {
        self.check_ids(ids)?;
        self.check_slopes(slopes)?;
        let cache = self.forward_cached(ids, slopes, None);
        Ok(Logits {
            rows: ids.len(),
            cols: self.config.vocab_size,
            data: cache.logits,
        })
    }

    /// `Σ_{t≥1} ln P(ids[t] | ids[..t])` in inference mode; `ids` should
    /// start with BOS. Over-length input is an error, never truncated.
    pub fn sequence_log_prob(&self, ids: &[u32], slopes: &[F]) -> Result<f64> {
        if ids.len() < 2 {
            return Err(Error::Contract("need at least BOS and one token".into()));
        }
        let logits = self.forward(ids, slopes)?;
        let mut total = 0.0;
        for t in 0..ids.len() - 1 {
            let mut row = logits.row(t).to_vec();
            let lse = kernels::softmax_in_place(&mut row);
            let target = logits.row(t)[ids[t + 1] as usize];
            total += (target - lse).to_f64().unwrap();
        }
        Ok(total)
    }

    /// Inference-mode NLL over a set of sequences, computed in parallel and
    /// reduced in input order.
    pub fn nll(&self, batch: &[Vec<u32>], slopes: &[F]) -> Result<NllSum> {
        self.check_slopes(slopes)?;
        for s in batch {
            self.check_ids(s)?;
        }
        let parts: Vec<NllSum> = batch
            .par_iter()
            .map(|ids| {
                let cache = self.forward_cached(ids, slopes, None);
                backprop::sequence_nll(&cache.logits, ids, self.config.vocab_size)
            })
            .collect();
        Ok(parts.into_iter().fold(NllSum::default(), NllSum::merge))
    }

    /// Adds the gradient of the summed next-token NLL of `batch` into
    /// `grads` and returns that sum. With `dropout_seed` set, dropout is
    /// active and sequence `i` draws its masks from stream `i` of that seed.
    pub fn accumulate_gradients(
        &self,
        batch: &[Vec<u32>],
        slopes: &[F],
        dropout_seed: Option<u64>,
        grads: &mut [F],
    ) -> Result<NllSum> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if grads.len() != self.layout.total() {
            return Err(Error::Contract("gradient buffer has the wrong size".into()));
        }
        self.check_slopes(slopes)?;
        for s in batch {
            self.check_ids(s)?;
        }
        let n = batch.len();
        let shards = SHARD_COUNT.min(n);
        let bounds: Vec<(usize, usize)> = (0..shards).map(|k| (k * n / shards, (k + 1) * n / shards)).collect();
        let partials: Vec<(NllSum, Vec<F>)> = bounds
            .par_iter()
            .map(|&(lo, hi)| {
                let mut g = vec![F::zero(); self.layout.total()];
                let mut sum = NllSum::default();
                for i in lo..hi {
                    let rng = dropout_seed.map(|s| {
                        let mut r = ChaCha8Rng::seed_from_u64(s);
                        r.set_stream(i as u64);
                        r
                    });
                    sum = sum.merge(self.sequence_backward(&batch[i], slopes, rng, &mut g));
                }
                (sum, g)
            })
            .collect();
        let mut total = NllSum::default();
        for (sum, g) in partials {
            total = total.merge(sum);
            kernels::axpy(F::one(), &g, grads);
        }
        if !total.nll.is_finite() {
            return Err(Error::Numerical {
                context: format!("batch of {n} sequences"),
            });
        }
        Ok(total)
    }

    /// Mean next-token cross-entropy over all targets of the batch and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &[Vec<u32>],
        slopes: &[F],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<F>)> {
        let mut grads = vec![F::zero(); self.layout.total()];
        let sum = self.accumulate_gradients(batch, slopes, dropout_seed, &mut grads)?;
        if sum.targets == 0 {
            return Err(Error::Contract("batch has no prediction targets".into()));
        }
        let scale = F::one() / F::from_usize(sum.targets).unwrap();
        for g in &mut grads {
            *g = *g * scale;
        }
        Ok((sum.mean(), grads))
    }

    /// Final-layer (post-norm) states pooled over positions whose id is not
    /// in `skip`. Mean pooling by default, last kept position with
    /// `Pool::Last`.
    pub fn sentence_embedding(&self, ids: &[u32], slopes: &[F], skip: &[u32]) -> Result<Vec<F>> {
        self.check_ids(ids)?;
        self.check_slopes(slopes)?;
        let keep: Vec<usize> = (0..ids.len()).filter(|&i| !skip.contains(&ids[i])).collect();
        if keep.is_empty() {
            return Err(Error::Contract("sequence contains only special tokens".into()));
        }
        let cache = self.forward_cached(ids, slopes, None);
        let d = self.config.d_model;
        let states = &cache.final_norm.out;
        Ok(match self.config.pool {
            Pool::Last => {
                let i = *keep.last().unwrap();
                states[i * d..(i + 1) * d].to_vec()
            }
            Pool::Mean => {
                let mut out = vec![F::zero(); d];
                for &i in &keep {
                    kernels::axpy(F::one(), &states[i * d..(i + 1) * d], &mut out);
                }
                let inv = F::one() / F::from_usize(keep.len()).unwrap();
                out.iter_mut().for_each(|v| *v = *v * inv);
                out
            }
        })
    }
}
