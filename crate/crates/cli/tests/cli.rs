use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cplm::runner::verify_manifest;
use cplm_core::eval::EvalReport;

fn cplm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cplm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = r#"
config_version = 1
profile = "desk-scale"

[corpus]
train = "data/corpus.txt"

[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32

[train]
total_epochs = 3
batch_size = 16
lr = 3e-3
seeds = [1, 2]

[[variants]]
label = "flat"
kind = "none"

[[variants]]
label = "exp"
kind = "exponential"

[eval]
benchmark = "data/benchmark.jsonl"
epochs = [1, 3]

[analysis]
epochs = [1, 3]
"#;

/// Writes a synthetic corpus and the tiny config into `dir`.
fn tiny_setup(dir: &Path) -> PathBuf {
    let out = Command::new(env!("CARGO_BIN_EXE_cplm"))
        .args(["synth", "--tokens", "4000", "--pairs", "40", "--seed", "3"])
        .arg(dir.join("data"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    cfg
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn curves_without_config_use_default_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cplm(&["curves"], tmp.path());
    assert_eq!(code(&o), 0);
    for kind in ["none", "static", "exponential", "reversed_exponential"] {
        assert!(tmp.path().join(format!("curves/{kind}.csv")).exists(), "{kind}");
    }
    let exp = read(tmp.path().join("curves/exponential.csv"));
    let rows: Vec<&str> = exp.lines().skip(1).collect();
    assert_eq!(rows.len(), 11);
    let last: Vec<f64> = rows[10].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[0], 10.0);
    assert!((last[2] - (1.0 - 0.6f64.powi(10))).abs() < 1e-12);
    assert!(tmp.path().join("figures/capacity.svg").exists());
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    std::fs::write(&cfg, TINY.replace("lr = 3e-3", "lr = -1.0").replace("data/benchmark.jsonl", "data/absent.jsonl")).unwrap();
    let o = cplm(&["run", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(code(&o), 2);
    // Every problem is listed, not only the first.
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lr") && err.contains("absent.jsonl"), "{err}");
    assert!(!tmp.path().join("out").exists());

    std::fs::write(&cfg, "surprise = true\n").unwrap();
    assert_eq!(code(&cplm(&["run", "--config", cfg.to_str().unwrap()], tmp.path())), 2);

    // Commands that need a config refuse to run without one.
    assert_eq!(code(&cplm(&["train"], tmp.path())), 2);
}

#[test]
fn unreadable_inputs_exit_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&cplm(&["run", "--config", missing.to_str().unwrap()], tmp.path())), 4);

    // Output root that cannot be created as a directory.
    let cfg = tiny_setup(tmp.path());
    let blocker = tmp.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    assert_eq!(code(&cplm(&["preprocess", "--config", cfg.to_str().unwrap()], &blocker.join("out"))), 4);
}

#[test]
fn synth_writes_corpus_and_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cplm"))
        .args(["synth", "--tokens", "2000", "--pairs", "30"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let pairs = cplm_core::eval::load_benchmark(&tmp.path().join("benchmark.jsonl")).unwrap();
    assert_eq!(pairs.len(), 30);
    let words: usize = read(tmp.path().join("corpus.txt")).lines().map(|l| l.split_whitespace().count()).sum();
    assert!((2000..2100).contains(&words), "{words}");
}

#[test]
fn tiny_pipeline_tables_manifest_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = cplm(&["run", "--config", cfg_s, "--parallel", "2"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // Table 1 overall is the seed average of each run's final-epoch report.
    let t1 = read(out.join("tables/table1.csv"));
    let header: Vec<&str> = t1.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "model");
    assert_eq!(*header.last().unwrap(), "overall");
    for row in t1.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        let mean: f64 = [1, 2]
            .iter()
            .map(|s| {
                let r: EvalReport = serde_json::from_str(&read(out.join(format!("runs/{}/seed-{s}/eval/epoch-03.json", cells[0])))).unwrap();
                r.overall
            })
            .sum::<f64>()
            / 2.0;
        let shown: f64 = cells.last().unwrap().trim_end_matches(|c: char| !c.is_ascii_digit()).parse().unwrap();
        assert!((shown - 100.0 * mean).abs() < 0.005 + 1e-9, "{row} vs {mean}");
    }

    // No reversed variant, so Table 3 is skipped with a note.
    assert!(!out.join("tables/table3.csv").exists());
    assert!(read(out.join("report.md")).to_lowercase().contains("table 3"));

    assert!(read(out.join("tables/trajectory.csv")).lines().count() > 1);
    assert!(verify_manifest(&out).unwrap().is_empty());

    // `report` rebuilds identical tables from the runs on disk.
    let before = read(out.join("tables/table1.csv"));
    std::fs::remove_dir_all(out.join("tables")).unwrap();
    assert_eq!(code(&cplm(&["report", "--config", cfg_s], &out)), 0);
    assert_eq!(read(out.join("tables/table1.csv")), before);

    // The manifest notices edited artifacts.
    let victim = out.join("runs/exp/seed-1/train.jsonl");
    std::fs::write(&victim, "tampered\n").unwrap();
    let bad = verify_manifest(&out).unwrap();
    assert_eq!(bad.len(), 1, "{bad:?}");
    assert!(bad[0].ends_with("train.jsonl"));
}

#[test]
fn seed_override_selects_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    let out = tmp.path().join("out");
    let o = cplm(&["train", "--config", cfg.to_str().unwrap(), "--seeds", "7"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("runs/exp/seed-7/ckpt/epoch-03.cplm").exists());
    assert!(!out.join("runs/exp/seed-1").exists());
    let lines = read(out.join("runs/flat/seed-7/train.jsonl")).lines().count();
    assert_eq!(lines, 3);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("configs");
    std::fs::create_dir_all(&base).unwrap();
    let synth = Command::new(env!("CARGO_BIN_EXE_cplm"))
        .args(["synth", "--tokens", "500", "--pairs", "4"])
        .arg(tmp.path().join("data/synth"))
        .output()
        .unwrap();
    assert_eq!(code(&synth), 0);
    for f in ["aochildes.txt", "wikipedia.txt"] {
        std::fs::copy(tmp.path().join("data/synth/corpus.txt"), tmp.path().join("data").join(f)).unwrap();
    }
    std::fs::copy(tmp.path().join("data/synth/benchmark.jsonl"), tmp.path().join("data/zorro.jsonl")).unwrap();

    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let text = read(&path);
        let cfg = cplm::config::parse_config(&text, &base, &cplm::Overrides::default())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!cfg.variants.is_empty());
        seen += 1;
    }
    assert_eq!(seen, 4);

    let main = cplm::config::parse_config(&read(root.join("paper-main.toml")), &base, &cplm::Overrides::default()).unwrap();
    assert_eq!(main.train.total_epochs, 10);
    assert_eq!(main.train.seeds, vec![1, 2, 3]);
    assert_eq!(main.variants.len(), 5);
    let t6 = cplm::config::parse_config(&read(root.join("table-6.toml")), &base, &cplm::Overrides::default()).unwrap();
    assert_eq!(t6.train.total_epochs, 20);
    assert_eq!(t6.train.lr, 5e-6);
}
