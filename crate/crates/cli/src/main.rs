use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cplm::config::{default_rates, Variant, DEFAULT_HORIZON, OUT_ENV};
use cplm::error::EXIT_OK;
use cplm::runner::{self, execute, Stages};
use cplm::{load_config, CliError, CliResult, ExperimentConfig, Overrides, Profile};
use cplm_core::attention_bias::{ScheduleKind, ScheduleSpec};
use cplm_core::eval::{benchmark_jsonl, build_report, load_benchmark, score_benchmark, ModelScorer};
use cplm_core::model::checkpoint::Checkpoint;
use cplm_core::synthetic::{generate_pairs, generate_sentences};
use cplm_core::tokenizer::Tokenizer;

#[derive(Parser)]
#[command(name = "cplm", version, about = "Train and evaluate language models under scheduled attention-distance penalties")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset: paper-main, table-6, length-bands or desk-scale.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Comma-separated seeds, replacing the configured list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output root; takes precedence over CPLM_OUT and the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum concurrent variant×seed runs.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and filter the corpus; write length statistics.
    Preprocess,
    /// Train every variant×seed (also trains the tokenizer).
    Train,
    /// Score checkpoints on the benchmark. With --checkpoint, scores a single
    /// checkpoint and prints its report.
    Eval {
        #[arg(long, requires_all = ["tokenizer", "benchmark"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Embedding-space statistics across epochs for trained runs.
    Analyze,
    /// Full pipeline: preprocess, train, eval, analyze, tables, manifest.
    Run,
    /// Schedule and capacity curves only; needs no corpus.
    Curves,
    /// Rebuild tables and manifest from runs on disk.
    Report,
    /// Write a synthetic agreement corpus and matching minimal pairs.
    Synth {
        #[arg(long, default_value_t = 50_000)]
        tokens: usize,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory for corpus.txt and benchmark.jsonl.
        dir: PathBuf,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            profile: self.profile,
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            parallel: self.parallel,
        }
    }

    fn experiment(&self) -> CliResult<ExperimentConfig> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
        load_config(path, &self.overrides())
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("cplm-out"))
}

fn curves_only(cli: &Cli) -> CliResult<()> {
    let (variants, out) = match &cli.config {
        Some(_) => {
            let cfg = cli.experiment()?;
            (cfg.variants, cfg.output_dir)
        }
        None => {
            let kinds = [
                ScheduleKind::None,
                ScheduleKind::Static,
                ScheduleKind::Exponential,
                ScheduleKind::ReversedExponential,
            ];
            let variants = kinds
                .into_iter()
                .map(|k| {
                    let (m0, r) = default_rates(k);
                    let schedule = if k.has_bias() {
                        ScheduleSpec::new(k, m0, r, DEFAULT_HORIZON)?
                    } else {
                        ScheduleSpec::none()
                    };
                    Ok(Variant {
                        label: k.as_str().to_owned(),
                        schedule,
                    })
                })
                .collect::<cplm_core::Result<Vec<_>>>()?;
            (variants, out_root(cli))
        }
    };
    let mut series = Vec::new();
    for v in &variants {
        let curve = cplm_core::attention_bias::capacity_curve(&v.schedule);
        runner::write(
            &out.join("curves").join(format!("{}.csv", v.label)),
            cplm_core::attention_bias::capacity_csv(&curve),
        )?;
        series.push(cplm::svg::Series {
            name: v.label.clone(),
            points: curve.iter().map(|p| (f64::from(p.epoch), p.w)).collect(),
        });
    }
    runner::write(
        &out.join("figures").join("capacity.svg"),
        cplm::svg::line_chart("working-memory capacity w = 1 - m", "epoch", "w", &series),
    )?;
    println!("{}", out.join("curves").display());
    Ok(())
}

fn eval_single(checkpoint: &Path, tokenizer: &Path, benchmark: &Path) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let tok = Tokenizer::load(tokenizer)?;
    if ck.config().vocab_size != tok.vocab_size() {
        return Err(CliError::Usage(format!(
            "checkpoint vocab_size {} does not match tokenizer ({})",
            ck.config().vocab_size,
            tok.vocab_size()
        )));
    }
    let pairs = load_benchmark(benchmark)?;
    let slopes = ck.inference_slopes();
    let scorer = ModelScorer {
        model: &ck.model,
        slopes: &slopes,
    };
    let results = score_benchmark(&scorer, &tok, &pairs)?;
    let report = build_report(&results, &checkpoint.display().to_string(), &[])?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(cplm_core::Error::from)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Preprocess => {
            let cfg = cli.experiment()?;
            let c = runner::preprocess(&cfg)?;
            println!("{} sentences -> {}", c.len(), cfg.output_dir.join("corpus").display());
            Ok(())
        }
        Command::Train => stage(cli, Stages { train: true, eval: false, analyze: false }),
        Command::Eval {
            checkpoint: Some(ck),
            tokenizer: Some(tok),
            benchmark: Some(b),
        } => eval_single(ck, tok, b),
        Command::Eval { .. } => stage(cli, Stages { train: false, eval: true, analyze: false }),
        Command::Analyze => stage(cli, Stages { train: false, eval: false, analyze: true }),
        Command::Run => {
            let cfg = cli.experiment()?;
            cplm::run_experiment(&cfg)?;
            println!("{}", cfg.output_dir.display());
            Ok(())
        }
        Command::Curves => curves_only(cli),
        Command::Report => {
            let cfg = cli.experiment()?;
            cplm::report(&cfg)?;
            println!("{}", cfg.output_dir.join("tables").display());
            Ok(())
        }
        Command::Synth { tokens, pairs, seed, dir } => {
            let sentences = generate_sentences(*tokens, *seed);
            runner::write(&dir.join("corpus.txt"), sentences.join("\n") + "\n")?;
            let p = generate_pairs(*pairs, seed.wrapping_add(1));
            runner::write(&dir.join("benchmark.jsonl"), benchmark_jsonl(&p)?)?;
            println!("{} sentences, {} pairs -> {}", sentences.len(), p.len(), dir.display());
            Ok(())
        }
    }
}

fn stage(cli: &Cli, stages: Stages) -> CliResult<()> {
    let cfg = cli.experiment()?;
    let bundle = execute(&cfg, stages)?;
    match bundle.failures() {
        0 => Ok(()),
        failed => Err(CliError::Partial {
            failed,
            total: bundle.runs.len(),
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
