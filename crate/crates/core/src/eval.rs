//! Minimal-pair scoring, per-category accuracy reports and the pooled
//! two-proportion z-test.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::function::erf::erfc;

use crate::corpus::words;
use crate::error::{Error, Result};
use crate::model::{Real, Transformer};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub category: String,
    #[serde(default)]
    pub subcategory: String,
    pub good: String,
    pub bad: String,
}

/// Mid-level categories in report column order.
pub const TABLE1_CATEGORIES: [&str; 13] = [
    "D-N AGR",
    "S-V AGR",
    "ANA.AGR",
    "ARG.STR",
    "BINDING",
    "CASE",
    "ELLIPSIS",
    "FILLER.GAP",
    "IRREGULAR",
    "ISLAND",
    "LOCAL.ATR",
    "QUANTIFIERS",
    "NPI",
];

/// Known categories first in canonical order, then any others sorted.
pub fn column_order<'a>(categories: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let present: HashSet<&str> = categories.into_iter().map(String::as_str).collect();
    let mut out: Vec<String> = TABLE1_CATEGORIES
        .iter()
        .filter(|c| present.contains(*c))
        .map(|c| (*c).to_owned())
        .collect();
    let mut rest: Vec<String> = present
        .iter()
        .filter(|c| !TABLE1_CATEGORIES.contains(c))
        .map(|c| (*c).to_owned())
        .collect();
    rest.sort();
    out.extend(rest);
    out
}

fn check_pair(pair: &MinimalPair, line: usize) -> Result<()> {
    let err = |msg: &str| Error::Parse {
        line,
        msg: msg.to_owned(),
    };
    if pair.category.trim().is_empty() {
        return Err(err("empty category"));
    }
    if pair.good.trim().is_empty() || pair.bad.trim().is_empty() {
        return Err(err("empty sentence"));
    }
    if pair.good == pair.bad {
        return Err(err("good and bad sentences are identical"));
    }
    Ok(())
}

fn finish(pairs: Vec<MinimalPair>) -> Result<Vec<MinimalPair>> {
    if pairs.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    let mut seen = HashSet::new();
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for p in &pairs {
        if !seen.insert((&p.category, &p.subcategory, &p.good, &p.bad)) {
            log::warn!("duplicate pair kept: {:?} / {:?}", p.good, p.bad);
        }
        *counts.entry((&p.category, &p.subcategory)).or_default() += 1;
    }
    for ((c, s), n) in counts {
        log::debug!("benchmark {c}/{s}: {n} pairs");
    }
    Ok(pairs)
}

/// Parses one JSON object per line; blank lines are ignored and category
/// labels are upper-cased.
pub fn parse_benchmark(text: &str) -> Result<Vec<MinimalPair>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut pair: MinimalPair = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        pair.category = pair.category.trim().to_uppercase();
        check_pair(&pair, i + 1)?;
        pairs.push(pair);
    }
    finish(pairs)
}

pub fn load_benchmark(path: &Path) -> Result<Vec<MinimalPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_benchmark(&text)
}

pub fn benchmark_jsonl(pairs: &[MinimalPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

/// Converts the alternating-line layout: each consecutive pair of non-blank
/// lines is one minimal pair, good first when `good_first` is set.
pub fn pairs_from_alternating(
    text: &str,
    category: &str,
    subcategory: &str,
    good_first: bool,
) -> Result<Vec<MinimalPair>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if lines.len() % 2 == 1 {
        return Err(Error::Parse {
            line: lines.last().map_or(0, |(n, _)| *n),
            msg: "odd number of sentences".into(),
        });
    }
    let mut pairs = Vec::with_capacity(lines.len() / 2);
    for chunk in lines.chunks(2) {
        let (a, b) = (chunk[0].1.to_owned(), chunk[1].1.to_owned());
        let (good, bad) = if good_first { (a, b) } else { (b, a) };
        let pair = MinimalPair {
            category: category.trim().to_uppercase(),
            subcategory: subcategory.to_owned(),
            good,
            bad,
        };
        check_pair(&pair, chunk[0].0)?;
        pairs.push(pair);
    }
    finish(pairs)
}

/// Anything that assigns a log-probability to a token-id sequence.
pub trait SequenceScorer: Sync {
    fn max_len(&self) -> usize;
    fn log_prob(&self, ids: &[u32]) -> Result<f64>;
}

pub struct ModelScorer<'a, F: Real> {
    pub model: &'a Transformer<F>,
    pub slopes: &'a [F],
}

impl<F: Real> SequenceScorer for ModelScorer<'_, F> {
    fn max_len(&self) -> usize {
        self.model.config().max_seq_len
    }

    fn log_prob(&self, ids: &[u32]) -> Result<f64> {
        self.model.sequence_log_prob(ids, self.slopes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub category: String,
    pub subcategory: String,
    pub outcome: Outcome,
    pub good_log_prob: Option<f64>,
    pub bad_log_prob: Option<f64>,
}

/// Strict comparison; ties are incorrect.
pub fn judge(good: f64, bad: f64) -> Outcome {
    if good > bad {
        Outcome::Correct
    } else {
        Outcome::Incorrect
    }
}

/// Lower-cased, whitespace-tokenized, wrapped as `<bos> … <eos>`.
pub fn encode_eval_sentence(tok: &Tokenizer, sentence: &str) -> Vec<u32> {
    tok.encode_sentence(&words(&sentence.to_lowercase()))
}

pub fn score_pair(scorer: &dyn SequenceScorer, tok: &Tokenizer, pair: &MinimalPair) -> Result<PairResult> {
    let good = encode_eval_sentence(tok, &pair.good);
    let bad = encode_eval_sentence(tok, &pair.bad);
    let mut result = PairResult {
        category: pair.category.clone(),
        subcategory: pair.subcategory.clone(),
        outcome: Outcome::Skipped,
        good_log_prob: None,
        bad_log_prob: None,
    };
    if good.len() > scorer.max_len() || bad.len() > scorer.max_len() {
        log::warn!(
            "skipping over-length pair ({} / {} tokens, max {}): {:?}",
            good.len(),
            bad.len(),
            scorer.max_len(),
            pair.good
        );
        return Ok(result);
    }
    let g = scorer.log_prob(&good)?;
    let b = scorer.log_prob(&bad)?;
    result.outcome = judge(g, b);
    result.good_log_prob = Some(g);
    result.bad_log_prob = Some(b);
    Ok(result)
}

/// Scores every pair in parallel; output order follows input order.
pub fn score_benchmark(scorer: &dyn SequenceScorer, tok: &Tokenizer, pairs: &[MinimalPair]) -> Result<Vec<PairResult>> {
    pairs.par_iter().map(|p| score_pair(scorer, tok, p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub n_pairs: usize,
    pub n_correct: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_label: String,
    pub seed_set: Vec<u64>,
    pub per_category: BTreeMap<String, CategoryScore>,
    /// Unweighted mean of per-category accuracies.
    pub overall: f64,
    pub n_skipped: usize,
}

pub fn build_report(results: &[PairResult], model_label: &str, seed_set: &[u64]) -> Result<EvalReport> {
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for r in results {
        let e = counts.entry(r.category.clone()).or_default();
        match r.outcome {
            Outcome::Correct => {
                e.0 += 1;
                e.1 += 1;
            }
            Outcome::Incorrect => e.1 += 1,
            Outcome::Skipped => e.2 += 1,
        }
    }
    let per_category: BTreeMap<String, CategoryScore> = counts
        .into_iter()
        .filter(|(c, (_, n, _))| {
            if *n == 0 {
                log::warn!("category {c} has no scorable pairs");
            }
            *n > 0
        })
        .map(|(c, (k, n, s))| {
            let score = CategoryScore {
                accuracy: k as f64 / n as f64,
                n_pairs: n,
                n_correct: k,
                n_skipped: s,
            };
            (c, score)
        })
        .collect();
    if per_category.is_empty() {
        return Err(Error::Contract("no scorable pairs in any category".into()));
    }
    let overall = per_category.values().map(|c| c.accuracy).sum::<f64>() / per_category.len() as f64;
    Ok(EvalReport {
        model_label: model_label.to_owned(),
        seed_set: seed_set.to_vec(),
        per_category,
        overall,
        n_skipped: results.iter().filter(|r| r.outcome == Outcome::Skipped).count(),
    })
}

/// Sums correct and total counts per category across reports (e.g. seeds).
pub fn pool_counts(reports: &[EvalReport]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in reports {
        for (c, s) in &r.per_category {
            let e = out.entry(c.clone()).or_default();
            e.0 += s.n_correct;
            e.1 += s.n_pairs;
        }
    }
    out
}

/// Per-category mean accuracy across reports, plus the mean of the
/// per-report overall scores.
pub fn average_accuracy(reports: &[EvalReport]) -> (BTreeMap<String, f64>, f64) {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (c, s) in &r.per_category {
            let e = sums.entry(c.clone()).or_default();
            e.0 += s.accuracy;
            e.1 += 1;
        }
    }
    let per = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let overall = if reports.is_empty() {
        f64::NAN
    } else {
        reports.iter().map(|r| r.overall).sum::<f64>() / reports.len() as f64
    };
    (per, overall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    /// `None` when the pooled proportion is 0 or 1.
    pub z: Option<f64>,
    pub p_two_sided: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// Pooled two-proportion z-test at the 0.05 level.
pub fn z_test_proportions(c_a: usize, n_a: usize, c_b: usize, n_b: usize) -> Result<ZTest> {
    if n_a == 0 || n_b == 0 || c_a > n_a || c_b > n_b {
        return Err(Error::Contract(format!(
            "invalid counts {c_a}/{n_a} vs {c_b}/{n_b}"
        )));
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let (pa, pb) = (c_a as f64 / na, c_b as f64 / nb);
    let pooled = (c_a + c_b) as f64 / (na + nb);
    let var = pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb);
    if var <= 0.0 {
        let differ = pa != pb;
        return Ok(ZTest {
            z: None,
            p_two_sided: if differ { 0.0 } else { 1.0 },
            significant: differ,
            degenerate: true,
        });
    }
    let z = (pa - pb) / var.sqrt();
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(ZTest {
        z: Some(z),
        p_two_sided: p,
        significant: p < 0.05,
        degenerate: false,
    })
}

/// Exact two-sided binomial test against chance (p = 0.5).
pub fn binomial_chance_p(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, n as u64).expect("valid binomial");
    let hi = k.max(n - k) as u64;
    if 2 * hi == n as u64 {
        return 1.0;
    }
    (2.0 * dist.sf(hi - 1)).min(1.0)
}
