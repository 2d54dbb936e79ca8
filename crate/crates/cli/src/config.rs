//! Experiment configuration: a versioned TOML file layered over a named
//! profile.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cplm_core::analysis::Projection;
use cplm_core::attention_bias::{ScheduleKind, ScheduleSpec};
use cplm_core::model::{ModelConfig, Pool, Positional};
use cplm_core::tokenizer::{TokenizerMode, DEFAULT_VOCAB_SIZE, NUM_SPECIALS};
use cplm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_HORIZON: u32 = 10;
pub const OUT_ENV: &str = "CPLM_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "paper-main")]
    PaperMain,
    #[serde(rename = "table-6")]
    Table6,
    #[serde(rename = "length-bands")]
    LengthBands,
    #[serde(rename = "desk-scale")]
    DeskScale,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::PaperMain, Profile::Table6, Profile::LengthBands, Profile::DeskScale];

    pub fn name(self) -> &'static str {
        match self {
            Profile::PaperMain => "paper-main",
            Profile::Table6 => "table-6",
            Profile::LengthBands => "length-bands",
            Profile::DeskScale => "desk-scale",
        }
    }

    pub fn model(self) -> ModelConfig {
        let mut m = ModelConfig::paper(0);
        match self {
            Profile::PaperMain | Profile::Table6 => {}
            Profile::LengthBands => m.max_seq_len = 160,
            Profile::DeskScale => {
                m.n_layers = 2;
                m.d_model = 64;
                m.d_ff = 256;
            }
        }
        m
    }

    pub fn train(self) -> TrainConfig {
        let t = TrainConfig::table6();
        match self {
            Profile::Table6 => t,
            Profile::PaperMain | Profile::LengthBands => TrainConfig { total_epochs: 10, ..t },
            Profile::DeskScale => TrainConfig {
                lr: 5e-4,
                batch_size: 32,
                grad_accum_steps: 1,
                total_epochs: 10,
                seeds: vec![1],
                ..t
            },
        }
    }

    pub fn length_band(self) -> Option<(usize, usize)> {
        match self {
            Profile::LengthBands => Some((5, 10)),
            _ => None,
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Profile::ALL.iter().map(|p| p.name()).collect();
                format!("unknown profile {s:?} (expected one of {})", names.join(", "))
            })
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Default `(m0, r)` per schedule kind.
pub fn default_rates(kind: ScheduleKind) -> (f64, f64) {
    match kind {
        ScheduleKind::None => (0.0, 1.0),
        ScheduleKind::Static | ScheduleKind::Linear => (1.0, 1.0),
        ScheduleKind::Exponential => (1.0, 0.6),
        ScheduleKind::ReversedExponential => (0.01, 1.668),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    config_version: u32,
    profile: Option<String>,
    output_dir: Option<PathBuf>,
    parallel: Option<usize>,
    corpus: RawCorpus,
    tokenizer: Option<RawTokenizer>,
    model: Option<RawModel>,
    train: Option<RawTrain>,
    #[serde(default)]
    variants: Vec<RawVariant>,
    eval: Option<RawEval>,
    analysis: Option<RawAnalysis>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorpus {
    train: PathBuf,
    lowercase: Option<bool>,
    min_words: Option<usize>,
    length_band: Option<[usize; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTokenizer {
    mode: Option<TokenizerMode>,
    vocab_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_model: Option<usize>,
    d_ff: Option<usize>,
    max_seq_len: Option<usize>,
    dropout: Option<f64>,
    tied_embeddings: Option<bool>,
    pool: Option<Pool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    betas: Option<[f64; 2]>,
    eps: Option<f64>,
    batch_size: Option<usize>,
    grad_accum_steps: Option<usize>,
    total_epochs: Option<u32>,
    warmup_fraction: Option<f64>,
    n_restarts: Option<u32>,
    early_stop_tolerance_epochs: Option<u32>,
    eval_split_fraction: Option<f64>,
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariant {
    label: Option<String>,
    kind: ScheduleKind,
    m0: Option<f64>,
    r: Option<f64>,
    horizon: Option<u32>,
    uniform_slope: Option<bool>,
    snap_final_to_zero: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    benchmark: Option<PathBuf>,
    epochs: Option<Vec<u32>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    enabled: Option<bool>,
    categories: Option<Vec<String>>,
    projection: Option<Projection>,
    epochs: Option<Vec<u32>>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub train: PathBuf,
    pub lowercase: bool,
    pub min_words: usize,
    pub length_band: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSettings {
    pub mode: TokenizerMode,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub schedule: ScheduleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub benchmark: Option<PathBuf>,
    /// Empty means every completed epoch.
    pub epochs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub enabled: bool,
    pub categories: Vec<String>,
    pub projection: Projection,
    pub epochs: Vec<u32>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub profile: Profile,
    #[serde(skip_serializing, default)]
    pub output_dir: PathBuf,
    #[serde(skip_serializing, default = "one")]
    pub parallel: usize,
    pub corpus: CorpusSettings,
    pub tokenizer: TokenizerSettings,
    /// `vocab_size` is filled from the trained tokenizer; `positional` is
    /// chosen per variant.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub eval: EvalSettings,
    pub analysis: AnalysisSettings,
}

impl ExperimentConfig {
    /// Model configuration for one variant: learned positions without a
    /// distance penalty, none with one.
    pub fn model_for(&self, variant: &Variant, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        m.positional = if variant.schedule.kind.has_bias() {
            Positional::None
        } else {
            Positional::Learned
        };
        m
    }

    pub fn variant(&self, label: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.label == label)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub parallel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn one() -> usize {
    1
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> crate::CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| cplm_core::Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_config(&text, base, overrides)?)
}

/// Parses, fills defaults from the profile and validates. Relative paths are
/// taken relative to `base`.
pub fn parse_config(text: &str, base: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError {
        problems: vec![e.to_string().trim().to_owned()],
    })?;
    let mut problems = Vec::new();
    if raw.config_version != CONFIG_VERSION {
        problems.push(format!(
            "config_version {} unsupported (expected {CONFIG_VERSION})",
            raw.config_version
        ));
    }
    let profile = match (overrides.profile, raw.profile.as_deref()) {
        (Some(p), _) => p,
        (None, Some(name)) => name.parse().unwrap_or_else(|e: String| {
            problems.push(e);
            Profile::PaperMain
        }),
        (None, None) => Profile::PaperMain,
    };

    let tk = raw.tokenizer.unwrap_or_default();
    let tokenizer = TokenizerSettings {
        mode: tk.mode.unwrap_or_default(),
        vocab_size: tk.vocab_size.unwrap_or(DEFAULT_VOCAB_SIZE),
    };

    let rm = raw.model.unwrap_or_default();
    let mut model = profile.model();
    model.n_layers = rm.n_layers.unwrap_or(model.n_layers);
    model.n_heads = rm.n_heads.unwrap_or(model.n_heads);
    model.d_model = rm.d_model.unwrap_or(model.d_model);
    model.d_ff = rm.d_ff.unwrap_or(model.d_ff);
    model.max_seq_len = rm.max_seq_len.unwrap_or(model.max_seq_len);
    model.dropout = rm.dropout.unwrap_or(model.dropout);
    model.tied_embeddings = rm.tied_embeddings.unwrap_or(model.tied_embeddings);
    model.pool = rm.pool.unwrap_or(model.pool);

    let rt = raw.train.unwrap_or_default();
    let mut train = profile.train();
    train.lr = rt.lr.unwrap_or(train.lr);
    train.weight_decay = rt.weight_decay.unwrap_or(train.weight_decay);
    if let Some([b1, b2]) = rt.betas {
        train.betas = (b1, b2);
    }
    train.eps = rt.eps.unwrap_or(train.eps);
    train.batch_size = rt.batch_size.unwrap_or(train.batch_size);
    train.grad_accum_steps = rt.grad_accum_steps.unwrap_or(train.grad_accum_steps);
    train.total_epochs = rt.total_epochs.unwrap_or(train.total_epochs);
    train.warmup_fraction = rt.warmup_fraction.unwrap_or(train.warmup_fraction);
    train.n_restarts = rt.n_restarts.unwrap_or(train.n_restarts);
    train.early_stop_tolerance_epochs = rt.early_stop_tolerance_epochs.unwrap_or(train.early_stop_tolerance_epochs);
    train.eval_split_fraction = rt.eval_split_fraction.unwrap_or(train.eval_split_fraction);
    if let Some(s) = overrides.seeds.clone().or(rt.seeds) {
        train.seeds = s;
    }

    let variants: Vec<Variant> = raw
        .variants
        .into_iter()
        .map(|v| {
            let (m0, r) = default_rates(v.kind);
            Variant {
                label: v.label.unwrap_or_else(|| v.kind.as_str().to_owned()),
                schedule: ScheduleSpec {
                    kind: v.kind,
                    m0: v.m0.unwrap_or(m0),
                    r: v.r.unwrap_or(r),
                    horizon: v.horizon.unwrap_or(DEFAULT_HORIZON),
                    uniform_slope: v.uniform_slope.unwrap_or(false),
                    snap_final_to_zero: v.snap_final_to_zero.unwrap_or(false),
                },
            }
        })
        .collect();

    let re = raw.eval.unwrap_or_default();
    let eval = EvalSettings {
        benchmark: re.benchmark.map(|p| resolve(base, p)),
        epochs: re.epochs.unwrap_or_default(),
    };
    let ra = raw.analysis.unwrap_or_default();
    let total = train.total_epochs;
    let analysis = AnalysisSettings {
        enabled: ra.enabled.unwrap_or(true),
        categories: ra.categories.unwrap_or_default().iter().map(|c| c.to_uppercase()).collect(),
        projection: ra.projection.unwrap_or_default(),
        epochs: ra.epochs.unwrap_or_else(|| {
            let mut e = vec![1, 5, total];
            e.retain(|&x| x <= total);
            e.dedup();
            e
        }),
        seed: ra.seed.unwrap_or(0),
    };

    let output_dir = overrides
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| resolve(base, raw.output_dir.unwrap_or_else(|| PathBuf::from("cplm-out"))));

    let rc = raw.corpus;
    let cfg = ExperimentConfig {
        config_version: raw.config_version,
        profile,
        output_dir,
        parallel: overrides.parallel.or(raw.parallel).unwrap_or(1),
        corpus: CorpusSettings {
            train: resolve(base, rc.train),
            lowercase: rc.lowercase.unwrap_or(true),
            min_words: rc.min_words.unwrap_or(cplm_core::corpus::DEFAULT_MIN_WORDS),
            length_band: rc.length_band.map(|[a, b]| (a, b)).or(profile.length_band()),
        },
        tokenizer,
        model,
        train,
        variants,
        eval,
        analysis,
    };
    problems.extend(config_problems(&cfg));
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { problems })
    }
}

/// Every constraint violation in a resolved configuration.
pub fn config_problems(cfg: &ExperimentConfig) -> Vec<String> {
    let mut p = Vec::new();
    if !cfg.corpus.train.is_file() {
        p.push(format!("corpus.train: file not found: {}", cfg.corpus.train.display()));
    }
    if let Some((lo, hi)) = cfg.corpus.length_band {
        if lo == 0 || lo > hi {
            p.push(format!("corpus.length_band [{lo},{hi}] invalid"));
        }
    }
    if cfg.tokenizer.vocab_size <= NUM_SPECIALS {
        p.push(format!("tokenizer.vocab_size must exceed {NUM_SPECIALS}"));
    }
    let mut probe = cfg.model.clone();
    probe.vocab_size = cfg.tokenizer.vocab_size;
    p.extend(probe.problems().into_iter().map(|s| format!("model: {s}")));
    p.extend(cfg.train.problems().into_iter().map(|s| format!("train: {s}")));
    if cfg.train.seeds.is_empty() {
        p.push("train.seeds must not be empty".to_owned());
    }
    if cfg.train.seeds.iter().collect::<BTreeSet<_>>().len() != cfg.train.seeds.len() {
        p.push("train.seeds contains duplicates".to_owned());
    }
    if cfg.variants.is_empty() {
        p.push("at least one [[variants]] entry is required".to_owned());
    }
    let mut seen = BTreeSet::new();
    for v in &cfg.variants {
        if v.label.is_empty() || v.label.contains(['/', '\\', ',']) {
            p.push(format!("variant label {:?} is not usable as a directory name", v.label));
        }
        if !seen.insert(v.label.as_str()) {
            p.push(format!("duplicate variant label {:?}", v.label));
        }
        p.extend(v.schedule.problems().into_iter().map(|s| format!("variant {}: {s}", v.label)));
    }
    if let Some(b) = &cfg.eval.benchmark {
        if !b.is_file() {
            p.push(format!("eval.benchmark: file not found: {}", b.display()));
        }
    }
    for &e in cfg.eval.epochs.iter().chain(&cfg.analysis.epochs) {
        if e == 0 || e > cfg.train.total_epochs {
            p.push(format!("epoch {e} outside 1..={}", cfg.train.total_epochs));
        }
    }
    if cfg.parallel == 0 {
        p.push("parallel must be at least 1".to_owned());
    }
    if cfg.output_dir.exists() && !cfg.output_dir.is_dir() {
        p.push(format!("output_dir {} is not a directory", cfg.output_dir.display()));
    } else if let Ok(meta) = std::fs::metadata(&cfg.output_dir) {
        if meta.permissions().readonly() {
            p.push(format!("output_dir {} is read-only", cfg.output_dir.display()));
        }
    }
    p
}
