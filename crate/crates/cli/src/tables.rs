//! Aggregate tables and figures built from a results bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cplm_core::attention_bias::{capacity_csv, capacity_curve, ScheduleKind};
use cplm_core::eval::{average_accuracy, column_order, pool_counts, z_test_proportions, EvalReport, ZTest};
use cplm_core::Result;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::runner::{write, ResultsBundle};
use crate::svg::{self, Series};

pub const BETTER: &str = "*";
pub const WORSE: &str = "\u{2020}";

/// Final-epoch report of every successful seed, per variant, in config order.
pub fn final_reports(cfg: &ExperimentConfig, bundle: &ResultsBundle) -> Vec<(String, Vec<EvalReport>)> {
    cfg.variants
        .iter()
        .map(|v| {
            let reports = bundle.for_variant(&v.label).filter_map(|r| r.final_report().cloned()).collect();
            (v.label.clone(), reports)
        })
        .collect()
}

/// The no-penalty baseline every other row is marked against.
pub fn reference_label(cfg: &ExperimentConfig) -> Option<&str> {
    cfg.variants
        .iter()
        .find(|v| v.schedule.kind == ScheduleKind::None)
        .map(|v| v.label.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub category: String,
    pub correct_a: usize,
    pub n_a: usize,
    pub correct_b: usize,
    pub n_b: usize,
    pub test: ZTest,
}

impl Comparison {
    /// `*` when `a` is significantly better than `b`, `†` when worse.
    pub fn marker(&self) -> &'static str {
        if !self.test.significant {
            return "";
        }
        let pa = self.correct_a as f64 / self.n_a as f64;
        let pb = self.correct_b as f64 / self.n_b as f64;
        if pa > pb {
            BETTER
        } else {
            WORSE
        }
    }
}

/// Pooled-seed z-tests: every variant against the reference, and every
/// exponential variant against each other variant.
pub fn comparisons(cfg: &ExperimentConfig, finals: &[(String, Vec<EvalReport>)]) -> Result<Vec<Comparison>> {
    let pooled: BTreeMap<&str, BTreeMap<String, (usize, usize)>> =
        finals.iter().map(|(l, r)| (l.as_str(), pool_counts(r))).collect();
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    if let Some(reference) = reference_label(cfg) {
        for v in &cfg.variants {
            if v.label != reference {
                pairs.push((&v.label, reference));
            }
        }
    }
    for e in cfg.variants.iter().filter(|v| v.schedule.kind == ScheduleKind::Exponential) {
        for o in &cfg.variants {
            if o.label != e.label && !pairs.contains(&(&e.label, &o.label)) {
                pairs.push((&e.label, &o.label));
            }
        }
    }
    let mut out = Vec::new();
    for (a, b) in pairs {
        let (Some(ca), Some(cb)) = (pooled.get(a), pooled.get(b)) else {
            continue;
        };
        for (cat, &(ka, na)) in ca {
            let Some(&(kb, nb)) = cb.get(cat) else { continue };
            if na == 0 || nb == 0 {
                continue;
            }
            out.push(Comparison {
                a: a.to_owned(),
                b: b.to_owned(),
                category: cat.clone(),
                correct_a: ka,
                n_a: na,
                correct_b: kb,
                n_b: nb,
                test: z_test_proportions(ka, na, kb, nb)?,
            });
        }
    }
    Ok(out)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Seed-averaged accuracy (%) per category with markers against the
/// reference row.
pub fn table1_csv(cfg: &ExperimentConfig, finals: &[(String, Vec<EvalReport>)], comps: &[Comparison]) -> String {
    let cats: Vec<String> = column_order(finals.iter().flat_map(|(_, r)| r.iter().flat_map(|x| x.per_category.keys())));
    let reference = reference_label(cfg);
    let mut out = format!("model,{},overall\n", cats.join(","));
    for (label, reports) in finals {
        let mut row = vec![label.clone()];
        if reports.is_empty() {
            row.extend(std::iter::repeat_n(String::new(), cats.len() + 1));
        } else {
            let (per, overall) = average_accuracy(reports);
            for c in &cats {
                let marker = comps
                    .iter()
                    .find(|x| Some(x.b.as_str()) == reference && x.a == *label && x.category == *c)
                    .map_or("", Comparison::marker);
                row.push(per.get(c).map_or(String::new(), |a| format!("{}{marker}", pct(*a))));
            }
            row.push(pct(overall));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Forward minus reversed accuracy (percentage points), or the reason the
/// table cannot be built.
pub fn table3_csv(cfg: &ExperimentConfig, finals: &[(String, Vec<EvalReport>)]) -> std::result::Result<String, String> {
    let find = |kind: ScheduleKind| cfg.variants.iter().find(|v| v.schedule.kind == kind).map(|v| v.label.as_str());
    let (Some(fwd), Some(rev)) = (find(ScheduleKind::Exponential), find(ScheduleKind::ReversedExponential)) else {
        return Err("table 3 omitted: needs both an exponential and a reversed_exponential variant".into());
    };
    let get = |l: &str| finals.iter().find(|(x, _)| x == l).map(|(_, r)| r).filter(|r| !r.is_empty());
    let (Some(rf), Some(rr)) = (get(fwd), get(rev)) else {
        return Err("table 3 omitted: forward or reversed variant has no successful runs".into());
    };
    let (pf, of) = average_accuracy(rf);
    let (pr, or) = average_accuracy(rr);
    let cats: Vec<String> = column_order(pf.keys().filter(|c| pr.contains_key(*c)));
    let mut out = format!("row,{},overall\n", cats.join(","));
    let line = |name: &str, vals: Vec<String>| format!("{name},{}\n", vals.join(","));
    out.push_str(&line(fwd, cats.iter().map(|c| pct(pf[c])).chain([pct(of)]).collect()));
    out.push_str(&line(rev, cats.iter().map(|c| pct(pr[c])).chain([pct(or)]).collect()));
    let delta = |a: f64, b: f64| format!("{:+.2}", 100.0 * (a - b));
    out.push_str(&line(
        "delta",
        cats.iter().map(|c| delta(pf[c], pr[c])).chain([delta(of, or)]).collect(),
    ));
    Ok(out)
}

/// Capacity-curve CSV per biased variant plus one combined figure.
pub fn write_curves(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut series = Vec::new();
    for v in &cfg.variants {
        let curve = capacity_curve(&v.schedule);
        let path = out.join("curves").join(format!("{}.csv", v.label));
        write(&path, capacity_csv(&curve))?;
        written.push(path.to_string_lossy().into_owned());
        series.push(Series {
            name: v.label.clone(),
            points: curve.iter().map(|p| (f64::from(p.epoch), p.w)).collect(),
        });
    }
    write(
        &out.join("figures").join("capacity.svg"),
        svg::line_chart("working-memory capacity w = 1 - m", "epoch", "w", &series),
    )?;
    Ok(written)
}

/// Seed-averaged accuracy per evaluated epoch. An epoch is included only
/// when every successful seed of the variant evaluated it.
pub fn trajectory(cfg: &ExperimentConfig, bundle: &ResultsBundle) -> (String, Vec<Series>) {
    let mut rows: Vec<(String, u32, BTreeMap<String, f64>, f64)> = Vec::new();
    for v in &cfg.variants {
        let runs: Vec<_> = bundle.for_variant(&v.label).collect();
        if runs.is_empty() {
            continue;
        }
        let epochs: Vec<u32> = runs[0]
            .reports
            .keys()
            .copied()
            .filter(|e| runs.iter().all(|r| r.reports.contains_key(e)))
            .collect();
        for e in epochs {
            let reps: Vec<EvalReport> = runs.iter().map(|r| r.reports[&e].clone()).collect();
            let (per, overall) = average_accuracy(&reps);
            rows.push((v.label.clone(), e, per, overall));
        }
    }
    let cats = column_order(rows.iter().flat_map(|r| r.2.keys()));
    let mut csv = format!("variant,epoch,{},overall\n", cats.join(","));
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (label, e, per, overall) in &rows {
        let vals: Vec<String> = cats.iter().map(|c| per.get(c).map_or(String::new(), |a| pct(*a))).collect();
        let _ = writeln!(csv, "{label},{e},{},{}", vals.join(","), pct(*overall));
        series.entry(label).or_default().push((f64::from(*e), 100.0 * overall));
    }
    let order: Vec<Series> = cfg
        .variants
        .iter()
        .filter_map(|v| {
            series.get(v.label.as_str()).map(|p| Series {
                name: v.label.clone(),
                points: p.clone(),
            })
        })
        .collect();
    (csv, order)
}

/// Space statistics of every analyzed run under one header; runs whose
/// epochs differ from the first are reported separately.
pub fn table4_csv(bundle: &ResultsBundle) -> (String, Vec<String>) {
    let mut header: Option<String> = None;
    let mut body = String::new();
    let mut skipped = Vec::new();
    for r in bundle.runs.iter().filter(|r| r.status.ok) {
        let Some(t) = &r.space else { continue };
        let csv = t.to_csv(&format!("{}/seed-{}", r.variant, r.seed));
        let mut lines = csv.lines();
        let (h, row) = (lines.next().unwrap_or_default().to_owned(), lines.next().unwrap_or_default());
        match &header {
            None => header = Some(h),
            Some(x) if *x != h => {
                skipped.push(format!("{}/seed-{}", r.variant, r.seed));
                continue;
            }
            _ => {}
        }
        let _ = writeln!(body, "{row}");
    }
    (header.map_or(String::new(), |h| format!("{h}\n{body}")), skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub pooled: BTreeMap<String, (usize, usize)>,
    pub per_seed: Vec<EvalReport>,
}

/// Writes every table and figure; returns notes about omissions.
pub fn emit_tables(cfg: &ExperimentConfig, bundle: &ResultsBundle) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let tables = out.join("tables");
    let mut notes = Vec::new();
    write_curves(cfg, out)?;

    let finals = final_reports(cfg, bundle);
    if finals.iter().all(|(_, r)| r.is_empty()) {
        notes.push("no evaluation results; accuracy tables omitted".to_owned());
    } else {
        let comps = comparisons(cfg, &finals)?;
        if reference_label(cfg).is_none() {
            notes.push("no variant of kind none; table 1 carries no significance markers".to_owned());
        }
        write(&tables.join("table1.csv"), table1_csv(cfg, &finals, &comps))?;
        write(&tables.join("significance.json"), serde_json::to_string_pretty(&comps)?)?;
        let counts: Vec<CountsRow> = finals
            .iter()
            .map(|(l, r)| CountsRow {
                variant: l.clone(),
                seeds: r.iter().flat_map(|x| x.seed_set.iter().copied()).collect(),
                pooled: pool_counts(r),
                per_seed: r.clone(),
            })
            .collect();
        write(&tables.join("table1_counts.json"), serde_json::to_string_pretty(&counts)?)?;
        match table3_csv(cfg, &finals) {
            Ok(csv) => write(&tables.join("table3.csv"), csv)?,
            Err(note) => notes.push(note),
        }
        let (csv, series) = trajectory(cfg, bundle);
        write(&tables.join("trajectory.csv"), csv)?;
        write(
            &out.join("figures").join("trajectory.svg"),
            svg::line_chart("accuracy by epoch", "epoch", "accuracy (%)", &series),
        )?;
    }
    let (t4, skipped) = table4_csv(bundle);
    if t4.is_empty() {
        notes.push("no embedding-space analysis available; table 4 omitted".to_owned());
    } else {
        write(&tables.join("table4.csv"), t4)?;
    }
    for s in skipped {
        notes.push(format!("{s}: analysis epochs differ; see its analysis/space.csv"));
    }
    for r in bundle.runs.iter().filter(|r| !r.status.ok) {
        notes.push(format!(
            "{}/seed-{} failed during {}: {}",
            r.variant,
            r.seed,
            r.status.stage,
            r.status.error.as_deref().unwrap_or("unknown error")
        ));
    }
    let mut md = String::from("# Results\n\n");
    if notes.is_empty() {
        md.push_str("All tables emitted.\n");
    }
    for n in &notes {
        let _ = writeln!(md, "- {n}");
    }
    write(&out.join("report.md"), md)?;
    Ok(notes)
}
