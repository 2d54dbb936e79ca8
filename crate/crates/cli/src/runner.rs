//! Pipeline stages. Each variant×seed run owns `runs/<label>/seed-<seed>/`
//! and records its outcome in `status.json` there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cplm_core::analysis::{projections_csv, track_trajectory, SpaceTable};
use cplm_core::corpus::{filter_by_length, histogram_csv, length_histogram, load_corpus, Corpus, LengthBand};
use cplm_core::eval::{build_report, load_benchmark, score_benchmark, EvalReport, MinimalPair, ModelScorer};
use cplm_core::model::checkpoint::Checkpoint;
use cplm_core::tokenizer::{train_tokenizer, Tokenizer};
use cplm_core::trainer::{train, TrainRunRecord};
use cplm_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{CliError, CliResult};
use crate::svg;

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn run_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join("runs").join(label).join(format!("seed-{seed}"))
}

pub fn tokenizer_path(out: &Path) -> PathBuf {
    out.join("tokenizer.json")
}

/// Loads and filters the training corpus and writes its statistics.
pub fn preprocess(cfg: &ExperimentConfig) -> Result<Corpus> {
    let mut corpus = load_corpus(&cfg.corpus.train, cfg.corpus.lowercase, cfg.corpus.min_words)?;
    if let Some((lo, hi)) = cfg.corpus.length_band {
        corpus = filter_by_length(&corpus, LengthBand::new(lo, hi)?);
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
    }
    let dir = cfg.output_dir.join("corpus");
    let clean = dir.join("clean.txt");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    corpus.write(&clean)?;
    write(&dir.join("length_histogram.csv"), histogram_csv(&length_histogram(&corpus)))?;
    write(
        &dir.join("preprocessing.json"),
        serde_json::to_string_pretty(corpus.preprocessing_log())?,
    )?;
    Ok(corpus)
}

pub fn prepare_tokenizer(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Tokenizer> {
    let tok = train_tokenizer(corpus, cfg.tokenizer.vocab_size, cfg.tokenizer.mode)?;
    tok.save(&tokenizer_path(&cfg.output_dir))?;
    Ok(tok)
}

pub fn load_tokenizer(cfg: &ExperimentConfig) -> Result<Tokenizer> {
    Tokenizer::load(&tokenizer_path(&cfg.output_dir))
}

pub fn load_pairs(cfg: &ExperimentConfig) -> Result<Option<Vec<MinimalPair>>> {
    cfg.eval.benchmark.as_deref().map(load_benchmark).transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub variant: String,
    pub seed: u64,
    pub ok: bool,
    pub stage: String,
    pub error: Option<String>,
}

fn write_status(cfg: &ExperimentConfig, v: &Variant, seed: u64, stage: &str, err: Option<&Error>) -> Result<()> {
    let status = RunStatus {
        variant: v.label.clone(),
        seed,
        ok: err.is_none(),
        stage: stage.to_owned(),
        error: err.map(ToString::to_string),
    };
    write(
        &run_dir(&cfg.output_dir, &v.label, seed).join("status.json"),
        serde_json::to_string_pretty(&status)?,
    )
}

pub fn train_run(cfg: &ExperimentConfig, v: &Variant, seed: u64, corpus: &Corpus, tok: &Tokenizer) -> Result<TrainRunRecord> {
    let dir = run_dir(&cfg.output_dir, &v.label, seed);
    let model = cfg.model_for(v, tok.vocab_size());
    Ok(train(&model, &v.schedule, corpus, tok, &cfg.train, seed, &dir)?.record)
}

pub fn load_record(dir: &Path) -> Result<TrainRunRecord> {
    Ok(serde_json::from_str(&read(&dir.join("run.json"))?)?)
}

/// Epochs to evaluate: the configured ones that completed, plus the last
/// completed epoch.
fn eval_epochs(cfg: &ExperimentConfig, record: &TrainRunRecord) -> Vec<u32> {
    let done: Vec<u32> = record.epochs.iter().map(|e| e.epoch).collect();
    let mut out: Vec<u32> = if cfg.eval.epochs.is_empty() {
        done.clone()
    } else {
        cfg.eval.epochs.iter().copied().filter(|e| done.contains(e)).collect()
    };
    out.extend(done.last());
    out.sort_unstable();
    out.dedup();
    out
}

fn load_checkpoint(dir: &Path, record: &TrainRunRecord, epoch: u32) -> Result<Checkpoint> {
    let e = record
        .epochs
        .iter()
        .find(|e| e.epoch == epoch)
        .ok_or_else(|| Error::Contract(format!("no checkpoint for epoch {epoch}")))?;
    Checkpoint::load(&dir.join(&e.ckpt))
}

pub fn eval_run(
    cfg: &ExperimentConfig,
    v: &Variant,
    seed: u64,
    tok: &Tokenizer,
    pairs: &[MinimalPair],
) -> Result<BTreeMap<u32, EvalReport>> {
    let dir = run_dir(&cfg.output_dir, &v.label, seed);
    let record = load_record(&dir)?;
    let mut out = BTreeMap::new();
    for epoch in eval_epochs(cfg, &record) {
        let ck = load_checkpoint(&dir, &record, epoch)?;
        if ck.config().vocab_size != tok.vocab_size() {
            return Err(Error::Config("checkpoint does not match the tokenizer".into()));
        }
        let slopes = ck.inference_slopes();
        let scorer = ModelScorer {
            model: &ck.model,
            slopes: &slopes,
        };
        let results = score_benchmark(&scorer, tok, pairs)?;
        let report = build_report(&results, &format!("{}/seed-{seed}/epoch-{epoch}", v.label), &[seed])?;
        write(
            &dir.join("eval").join(format!("epoch-{epoch:02}.json")),
            serde_json::to_string_pretty(&report)?,
        )?;
        out.insert(epoch, report);
    }
    Ok(out)
}

pub fn load_reports(dir: &Path) -> Result<BTreeMap<u32, EvalReport>> {
    let eval = dir.join("eval");
    let mut out = BTreeMap::new();
    if !eval.is_dir() {
        return Ok(out);
    }
    let mut names: Vec<String> = std::fs::read_dir(&eval)
        .map_err(|e| Error::io(&eval, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    for n in names {
        let Some(epoch) = n.strip_prefix("epoch-").and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        out.insert(epoch, serde_json::from_str(&read(&eval.join(&n))?)?);
    }
    Ok(out)
}

/// Space statistics over the configured analysis epochs. `Ok(None)` when
/// fewer than two of those epochs completed.
pub fn analyze_run(
    cfg: &ExperimentConfig,
    v: &Variant,
    seed: u64,
    tok: &Tokenizer,
    pairs: &[MinimalPair],
) -> Result<Option<SpaceTable>> {
    let dir = run_dir(&cfg.output_dir, &v.label, seed);
    let record = load_record(&dir)?;
    let epochs: Vec<u32> = cfg
        .analysis
        .epochs
        .iter()
        .copied()
        .filter(|e| record.epochs.iter().any(|r| r.epoch == *e))
        .collect();
    if epochs.len() < 2 {
        log::warn!("{}/seed-{seed}: fewer than two analysis epochs completed", v.label);
        return Ok(None);
    }
    let ckpts: Vec<Checkpoint> = epochs
        .iter()
        .map(|&e| load_checkpoint(&dir, &record, e))
        .collect::<Result<_>>()?;
    let filter = (!cfg.analysis.categories.is_empty()).then_some(cfg.analysis.categories.as_slice());
    let traj = track_trajectory(&ckpts, tok, pairs, filter, cfg.analysis.projection, cfg.analysis.seed)?;
    let adir = dir.join("analysis");
    let label = format!("{}/seed-{seed}", v.label);
    write(&adir.join("space.csv"), traj.table.to_csv(&label))?;
    write(&adir.join("space.json"), serde_json::to_string_pretty(&traj.stats)?)?;
    write(&adir.join("projections.csv"), projections_csv(&traj.snapshots))?;
    for s in &traj.snapshots {
        if let Some(p) = &s.projection {
            let title = format!("{label} epoch {}", s.epoch);
            write(&adir.join(format!("epoch-{:02}.svg", s.epoch)), svg::scatter(&title, p, &s.labels))?;
        }
    }
    Ok(Some(traj.table))
}

pub fn load_space(dir: &Path) -> Result<Option<SpaceTable>> {
    let path = dir.join("analysis").join("space.json");
    if !path.is_file() {
        return Ok(None);
    }
    let stats: Vec<cplm_core::analysis::SpaceStats> = serde_json::from_str(&read(&path)?)?;
    Ok(Some(SpaceTable::from_stats(&stats)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub status: RunStatus,
    pub record: Option<TrainRunRecord>,
    pub reports: BTreeMap<u32, EvalReport>,
    pub space: Option<SpaceTable>,
}

impl RunOutcome {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.reports.values().next_back()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsBundle {
    pub runs: Vec<RunOutcome>,
}

impl ResultsBundle {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| !r.status.ok).count()
    }

    pub fn for_variant<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunOutcome> + 'a {
        self.runs.iter().filter(move |r| r.variant == label && r.status.ok)
    }
}

/// Reads every configured run back from disk.
pub fn load_bundle(cfg: &ExperimentConfig) -> Result<ResultsBundle> {
    let mut runs = Vec::new();
    for v in &cfg.variants {
        for &seed in &cfg.train.seeds {
            let dir = run_dir(&cfg.output_dir, &v.label, seed);
            let status_path = dir.join("status.json");
            let status: RunStatus = if status_path.is_file() {
                serde_json::from_str(&read(&status_path)?)?
            } else {
                RunStatus {
                    variant: v.label.clone(),
                    seed,
                    ok: false,
                    stage: "missing".into(),
                    error: Some("run has not been executed".into()),
                }
            };
            let record = load_record(&dir).ok();
            runs.push(RunOutcome {
                variant: v.label.clone(),
                seed,
                reports: if status.ok { load_reports(&dir)? } else { BTreeMap::new() },
                space: if status.ok { load_space(&dir)? } else { None },
                status,
                record,
            });
        }
    }
    Ok(ResultsBundle { runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub train: bool,
    pub eval: bool,
    pub analyze: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        train: true,
        eval: true,
        analyze: true,
    };
}

fn one_run(
    cfg: &ExperimentConfig,
    v: &Variant,
    seed: u64,
    stages: Stages,
    corpus: Option<&Corpus>,
    tok: &Tokenizer,
    pairs: Option<&[MinimalPair]>,
) -> Result<()> {
    let mut stage = "train";
    let result = (|| -> Result<()> {
        if stages.train {
            let c = corpus.ok_or_else(|| Error::Contract("training needs a corpus".into()))?;
            train_run(cfg, v, seed, c, tok)?;
        }
        if let Some(p) = pairs {
            if stages.eval {
                stage = "eval";
                eval_run(cfg, v, seed, tok, p)?;
            }
            if stages.analyze && cfg.analysis.enabled {
                stage = "analyze";
                analyze_run(cfg, v, seed, tok, p)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = &result {
        log::error!("{}/seed-{seed} failed during {stage}: {e}", v.label);
    }
    write_status(cfg, v, seed, if result.is_ok() { "done" } else { stage }, result.as_ref().err())?;
    Ok(())
}

/// Runs the requested stages for every variant×seed, at most
/// `cfg.parallel` at a time. Individual failures are recorded, not raised.
pub fn execute(cfg: &ExperimentConfig, stages: Stages) -> CliResult<ResultsBundle> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write(&cfg.output_dir.join("config.resolved.json"), serde_json::to_string_pretty(cfg).map_err(Error::from)?)?;
    let (corpus, tok) = if stages.train {
        let c = preprocess(cfg)?;
        let t = prepare_tokenizer(cfg, &c)?;
        (Some(c), t)
    } else {
        (None, load_tokenizer(cfg)?)
    };
    let pairs = load_pairs(cfg)?;
    if pairs.is_none() && (stages.eval || stages.analyze) && !stages.train {
        return Err(CliError::Usage("eval.benchmark is not configured".into()));
    }
    let jobs: Vec<(&Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|v| cfg.train.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(v, s)| one_run(cfg, v, *s, stages, corpus.as_ref(), &tok, pairs.as_deref()))
            .collect::<Result<Vec<()>>>()
    })?;
    Ok(load_bundle(cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestFile>,
    pub runs: Vec<RunStatus>,
}

pub const MANIFEST: &str = "manifest.json";

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p != root.join(MANIFEST) {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every file under the output directory.
pub fn write_manifest(out: &Path, bundle: &ResultsBundle) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(out, out, &mut paths)?;
    let files = paths
        .iter()
        .map(|p| {
            let rel: Vec<String> = p
                .strip_prefix(out)
                .unwrap_or(p)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            Ok(ManifestFile {
                path: rel.join("/"),
                sha256: sha256_file(p)?,
                bytes: std::fs::metadata(p).map_err(|e| Error::io(p, e))?.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        files,
        runs: bundle.runs.iter().map(|r| r.status.clone()).collect(),
    };
    write(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Checks every manifest entry against the files on disk.
pub fn verify_manifest(out: &Path) -> Result<Vec<String>> {
    let m: Manifest = serde_json::from_str(&read(&out.join(MANIFEST))?)?;
    let mut bad = Vec::new();
    for f in &m.files {
        let p = out.join(&f.path);
        match sha256_file(&p) {
            Ok(h) if h == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}
