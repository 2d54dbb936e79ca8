//! Representation dynamics across checkpoints: 2-D projection of sentence
//! embeddings, grid-histogram entropy and distances between epoch means.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{build_report, encode_eval_sentence, score_benchmark, EvalReport, MinimalPair, ModelScorer};
use crate::model::checkpoint::Checkpoint;
use crate::tokenizer::Tokenizer;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSnapshot {
    pub epoch: u32,
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub projection: Option<Vec<[f64; 2]>>,
    /// Identifies the fitted projection the points live in.
    pub space_id: Option<u64>,
}

impl EmbeddingSnapshot {
    pub fn new(epoch: u32, labels: Vec<String>, vectors: Vec<Vec<f64>>) -> Self {
        Self {
            epoch,
            labels,
            vectors,
            projection: None,
            space_id: None,
        }
    }
}

fn check_matrix(vectors: &[Vec<f64>]) -> Result<usize> {
    if vectors.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 points (got {})", vectors.len())));
    }
    let d = vectors[0].len();
    if d < 2 {
        return Err(Error::Contract(format!("need at least 2 dimensions (got {d})")));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Contract("ragged embedding matrix".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Contract("non-finite embedding value".into()));
    }
    Ok(d)
}

/// Deterministic top-2 principal components of mean-centered data. Each
/// component's sign makes its largest-magnitude loading positive.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_matrix(vectors)?;
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let total: f64 = cov.diagonal().iter().sum();
    if total <= f64::MIN_POSITIVE {
        log::warn!("zero-variance embeddings; projection is all zeros");
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let mut out = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[k] <= 1e-12 * top {
            continue;
        }
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = axis
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(0.0, |(_, v)| v);
        if lead < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[c] = x.row(i).iter().zip(&axis).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
}

impl TsneParams {
    pub fn for_points(n: usize) -> Self {
        Self {
            perplexity: 30f64.min((n as f64 - 1.0) / 3.0),
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
        }
    }
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.par_iter()
        .map(|a| x.iter().map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()).collect())
        .collect()
}

/// Row-conditional affinities whose entropy matches `ln(perplexity)`.
fn conditional_p(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let mut p = vec![0.0; dist.len()];
    for _ in 0..64 {
        let min = dist
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (j, d) in dist.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(d - min) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != i && *pj > 0.0 {
                h -= *pj * pj.ln();
            }
        }
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE with a fixed seed.
pub fn tsne_2d(vectors: &[Vec<f64>], params: TsneParams, seed: u64) -> Result<Vec<[f64; 2]>> {
    check_matrix(vectors)?;
    let n = vectors.len();
    let dist = sq_dists(vectors);
    let cond: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| conditional_p(&dist[i], i, params.perplexity))
        .collect();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let exaggerate_until = (params.iterations / 4).min(250);

    for it in 0..params.iterations {
        let exag = if it < exaggerate_until { params.early_exaggeration } else { 1.0 };
        let momentum = if it < exaggerate_until { 0.5 } else { 0.8 };
        let num: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let dx = y[i][0] - y[j][0];
                            let dy = y[i][1] - y[j][1];
                            1.0 / (1.0 + dx * dx + dy * dy)
                        }
                    })
                    .collect()
            })
            .collect();
        let z: f64 = num.iter().map(|r| r.iter().sum::<f64>()).sum();
        let grads: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let coef = (exag * p[i][j] - (num[i][j] / z).max(1e-12)) * num[i][j];
                    g[0] += 4.0 * coef * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * coef * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for k in 0..2 {
                let same = (grads[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(0.01);
                update[i][k] = momentum * update[i][k] - params.learning_rate * gains[i][k] * grads[i][k];
                y[i][k] += update[i][k];
            }
        }
        for k in 0..2 {
            let m = y.iter().map(|v| v[k]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|v| v[k] -= m);
        }
    }
    Ok(y)
}

pub fn project_2d(vectors: &[Vec<f64>], method: Projection, seed: u64) -> Result<Vec<[f64; 2]>> {
    match method {
        Projection::Pca => pca_2d(vectors),
        Projection::Tsne => tsne_2d(vectors, TsneParams::for_points(vectors.len()), seed),
    }
}

static NEXT_SPACE: AtomicU64 = AtomicU64::new(1);

/// Fits one projection over the concatenation of all snapshots and writes
/// each snapshot's share back.
pub fn joint_project(snapshots: &mut [EmbeddingSnapshot], method: Projection, seed: u64) -> Result<()> {
    let all: Vec<Vec<f64>> = snapshots.iter().flat_map(|s| s.vectors.iter().cloned()).collect();
    let proj = project_2d(&all, method, seed)?;
    let space = NEXT_SPACE.fetch_add(1, Ordering::Relaxed);
    let mut offset = 0;
    for s in snapshots.iter_mut() {
        let n = s.vectors.len();
        s.projection = Some(proj[offset..offset + n].to_vec());
        s.space_id = Some(space);
        offset += n;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn of(points: &[[f64; 2]]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Self {
            min: *first,
            max: *first,
        };
        for p in points {
            for k in 0..2 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    pub fn union(self, other: Self) -> Self {
        Self {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }
}

fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let width = hi - lo;
    if width <= 0.0 {
        return 0;
    }
    let padded = width * (1.0 + 1e-9);
    (((x - lo) / padded * bins as f64).floor() as usize).min(bins - 1)
}

/// Shannon entropy (nats) of the point counts on a `bins × bins` grid
/// spanning `bounds`.
pub fn histogram_entropy_in(points: &[[f64; 2]], bins: usize, bounds: Bounds) -> f64 {
    if points.is_empty() || bins == 0 {
        return 0.0;
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for p in points {
        let bx = bin_index(p[0], bounds.min[0], bounds.max[0], bins);
        let by = bin_index(p[1], bounds.min[1], bounds.max[1], bins);
        *counts.entry((bx, by)).or_default() += 1;
    }
    let n = points.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

/// Entropy over the points' own bounding box.
pub fn histogram_entropy(points: &[[f64; 2]], bins: usize) -> f64 {
    match Bounds::of(points) {
        Some(b) => histogram_entropy_in(points, bins, b),
        None => 0.0,
    }
}

pub fn mean_point(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

pub fn mean_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let (ma, mb) = (mean_point(a), mean_point(b));
    (ma[0] - mb[0]).hypot(ma[1] - mb[1])
}

/// Euclidean distance between the projected means of two snapshots that
/// share one fitted projection.
pub fn epoch_mean_distance(a: &EmbeddingSnapshot, b: &EmbeddingSnapshot) -> Result<f64> {
    let (Some(pa), Some(pb)) = (&a.projection, &b.projection) else {
        return Err(Error::Contract("snapshot not projected".into()));
    };
    if a.space_id != b.space_id {
        return Err(Error::Contract("snapshots come from different projections".into()));
    }
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Contract("empty snapshot".into()));
    }
    Ok(mean_distance(pa, pb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub epoch: u32,
    pub entropy: f64,
    pub mean_distance_to: BTreeMap<u32, f64>,
}

/// Entropy per snapshot over the union bounding box, plus all pairwise mean
/// distances.
pub fn space_stats(snapshots: &[EmbeddingSnapshot], bins: usize) -> Result<Vec<SpaceStats>> {
    let mut bounds: Option<Bounds> = None;
    for s in snapshots {
        let p = s.projection.as_ref().ok_or_else(|| Error::Contract("snapshot not projected".into()))?;
        if let Some(b) = Bounds::of(p) {
            bounds = Some(bounds.map_or(b, |u| u.union(b)));
        }
    }
    let bounds = bounds.ok_or_else(|| Error::Contract("no projected points".into()))?;
    snapshots
        .iter()
        .map(|s| {
            let mut mean_distance_to = BTreeMap::new();
            for o in snapshots {
                if o.epoch != s.epoch {
                    mean_distance_to.insert(o.epoch, epoch_mean_distance(s, o)?);
                }
            }
            Ok(SpaceStats {
                epoch: s.epoch,
                entropy: histogram_entropy_in(s.projection.as_ref().unwrap(), bins, bounds),
                mean_distance_to,
            })
        })
        .collect()
}

/// Consecutive epoch pairs, then first-to-last when there are more than two.
pub fn distance_pairs(epochs: &[u32]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = epochs.windows(2).map(|w| (w[0], w[1])).collect();
    if epochs.len() > 2 {
        out.push((epochs[0], epochs[epochs.len() - 1]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTable {
    pub epochs: Vec<u32>,
    pub entropy: Vec<f64>,
    pub distances: Vec<((u32, u32), f64)>,
}

impl SpaceTable {
    pub fn from_stats(stats: &[SpaceStats]) -> Self {
        let epochs: Vec<u32> = stats.iter().map(|s| s.epoch).collect();
        let by_epoch: BTreeMap<u32, &SpaceStats> = stats.iter().map(|s| (s.epoch, s)).collect();
        let distances = distance_pairs(&epochs)
            .into_iter()
            .map(|(a, b)| ((a, b), by_epoch[&a].mean_distance_to[&b]))
            .collect();
        Self {
            entropy: stats.iter().map(|s| s.entropy).collect(),
            epochs,
            distances,
        }
    }

    /// One row: entropies per epoch, then distances per epoch pair.
    pub fn to_csv(&self, label: &str) -> String {
        let mut head = vec!["label".to_owned()];
        head.extend(self.epochs.iter().map(|e| format!("entropy_e{e}")));
        head.extend(self.distances.iter().map(|((a, b), _)| format!("distance_{a}-{b}")));
        let mut row = vec![label.to_owned()];
        row.extend(self.entropy.iter().map(|h| format!("{h:.6}")));
        row.extend(self.distances.iter().map(|(_, d)| format!("{d:.6}")));
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

pub fn projections_csv(snapshots: &[EmbeddingSnapshot]) -> String {
    let mut out = String::from("x,y,label,epoch\n");
    for s in snapshots {
        if let Some(p) = &s.projection {
            for (pt, label) in p.iter().zip(&s.labels) {
                let _ = writeln!(out, "{:.6},{:.6},{},{}", pt[0], pt[1], label, s.epoch);
            }
        }
    }
    out
}

/// Sentence embeddings for both members of every pair, labeled good/bad.
/// Pairs with an over-length member are left out.
pub fn embed_pairs(ckpt: &Checkpoint, tok: &Tokenizer, pairs: &[MinimalPair]) -> Result<EmbeddingSnapshot> {
    let model = &ckpt.model;
    let slopes = ckpt.inference_slopes();
    let skip = tok.specials().structural();
    let max = model.config().max_seq_len;
    let items: Vec<(&str, &str)> = pairs
        .iter()
        .filter(|p| {
            let fits = encode_eval_sentence(tok, &p.good).len() <= max && encode_eval_sentence(tok, &p.bad).len() <= max;
            if !fits {
                log::warn!("over-length pair left out of embeddings: {:?}", p.good);
            }
            fits
        })
        .flat_map(|p| [("good", p.good.as_str()), ("bad", p.bad.as_str())])
        .collect();
    let vectors: Vec<Vec<f64>> = items
        .par_iter()
        .map(|(_, s)| {
            let ids = encode_eval_sentence(tok, s);
            model
                .sentence_embedding(&ids, &slopes, &skip)
                .map(|v| v.into_iter().map(f64::from).collect())
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingSnapshot::new(
        ckpt.epoch,
        items.iter().map(|(l, _)| (*l).to_owned()).collect(),
        vectors,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub reports: Vec<(u32, EvalReport)>,
    pub snapshots: Vec<EmbeddingSnapshot>,
    pub stats: Vec<SpaceStats>,
    pub table: SpaceTable,
}

/// Accuracy and embedding-space statistics for each checkpoint, with one
/// joint projection across all of them.
pub fn track_trajectory(
    checkpoints: &[Checkpoint],
    tok: &Tokenizer,
    pairs: &[MinimalPair],
    category_filter: Option<&[String]>,
    method: Projection,
    seed: u64,
) -> Result<Trajectory> {
    if checkpoints.len() < 2 {
        return Err(Error::Contract("trajectory needs at least 2 checkpoints".into()));
    }
    for c in checkpoints {
        if c.config().vocab_size != tok.vocab_size() {
            return Err(Error::Config(format!(
                "checkpoint epoch {} has vocab_size {} but the tokenizer has {}",
                c.epoch,
                c.config().vocab_size,
                tok.vocab_size()
            )));
        }
    }
    let selected: Vec<MinimalPair> = match category_filter {
        Some(cats) if !cats.is_empty() => pairs
            .iter()
            .filter(|p| cats.iter().any(|c| c.eq_ignore_ascii_case(&p.category)))
            .cloned()
            .collect(),
        _ => pairs.to_vec(),
    };
    if selected.is_empty() {
        return Err(Error::Config("category filter selects no pairs".into()));
    }
    let mut reports = Vec::new();
    let mut snapshots = Vec::new();
    for c in checkpoints {
        let slopes = c.inference_slopes();
        let scorer = ModelScorer {
            model: &c.model,
            slopes: &slopes,
        };
        let results = score_benchmark(&scorer, tok, pairs)?;
        reports.push((c.epoch, build_report(&results, &format!("epoch {}", c.epoch), &[])?));
        snapshots.push(embed_pairs(c, tok, &selected)?);
    }
    joint_project(&mut snapshots, method, seed)?;
    let stats = space_stats(&snapshots, DEFAULT_BINS)?;
    let table = SpaceTable::from_stats(&stats);
    Ok(Trajectory {
        reports,
        snapshots,
        stats,
        table,
    })
}
