//! Distance penalties for attention scores and the working-memory schedules
//! that scale them over training.
//!
//! Each head `h` owns a geometric base slope `2^(-8(h)/H)`; at epoch `t` the
//! schedule yields a multiplier `m_t ∈ [0, 1]` and the head adds
//! `base_h · m_t · B[i][j]` with `B[i][j] = -(i - j)` to its scores.
//! Working-memory capacity is `w_t = 1 - m_t`.
//!
//! Capacity follows the saturating growth shape `y = b - a^x` with
//! `b = 1` and `a = r` once `m0 = 1`: fast early growth that levels off as
//! `w_t` approaches its ceiling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// No distance penalty at all; the model uses learned positions instead.
    None,
    Static,
    Linear,
    Exponential,
    ReversedExponential,
}

impl ScheduleKind {
    pub fn has_bias(self) -> bool {
        self != ScheduleKind::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::None => "none",
            ScheduleKind::Static => "static",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::ReversedExponential => "reversed_exponential",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub m0: f64,
    pub r: f64,
    pub horizon: u32,
    /// Apply `m_t` to every head directly instead of scaling the geometric
    /// per-head slopes.
    #[serde(default)]
    pub uniform_slope: bool,
    /// Force `m_T = 0` at the horizon (the exponential kinds otherwise end
    /// at `m0 · r^T`).
    #[serde(default)]
    pub snap_final_to_zero: bool,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, m0: f64, r: f64, horizon: u32) -> Result<Self> {
        let spec = Self {
            kind,
            m0,
            r,
            horizon,
            uniform_slope: false,
            snap_final_to_zero: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self {
            kind: ScheduleKind::None,
            m0: 0.0,
            r: 1.0,
            horizon: 1,
            uniform_slope: false,
            snap_final_to_zero: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.m0) {
            problems.push(format!("m0 out of [0,1] (got {})", self.m0));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            problems.push(format!("r must be positive (got {})", self.r));
        }
        if self.horizon < 1 {
            problems.push("horizon must be at least 1".to_owned());
        }
        problems
    }
}

/// Per-head geometric base slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlopes(Vec<f64>);

impl HeadSlopes {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `slopes[h] = ratio^h` with `ratio = 2^(-8/n_heads)`, so an 8-head model
/// gets `1, 1/2, …, 1/128`.
pub fn head_slopes(n_heads: usize) -> Result<HeadSlopes> {
    if n_heads == 0 {
        return Err(Error::Config("n_heads must be at least 1".into()));
    }
    let ratio = 2f64.powf(-8.0 / n_heads as f64);
    Ok(HeadSlopes((0..n_heads).map(|h| ratio.powi(h as i32)).collect()))
}

/// Causal distance-penalty matrix. Entries above the diagonal are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    seq_len: usize,
}

impl BiasMatrix {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// `Some(-(i - j))` for `j <= i`, `None` for masked entries.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        assert!(i < self.seq_len && j < self.seq_len, "index out of range");
        (j <= i).then(|| -((i - j) as f64))
    }

    /// Dense rows with `-inf` in the masked upper triangle.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.seq_len)
            .map(|i| {
                (0..self.seq_len)
                    .map(|j| self.get(i, j).unwrap_or(f64::NEG_INFINITY))
                    .collect()
            })
            .collect()
    }
}

pub fn bias_matrix(seq_len: usize) -> Result<BiasMatrix> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    Ok(BiasMatrix { seq_len })
}

/// Schedule multiplier `m_t`, clamped to `[0, 1]`. Epochs past the horizon
/// hold the horizon's value.
pub fn schedule_slope(spec: &ScheduleSpec, epoch: u32) -> f64 {
    let t = epoch.min(spec.horizon);
    if spec.snap_final_to_zero && t == spec.horizon && spec.kind != ScheduleKind::Static {
        return 0.0;
    }
    let raw = match spec.kind {
        ScheduleKind::None => 0.0,
        ScheduleKind::Static => spec.m0,
        ScheduleKind::Linear => spec.m0 * (1.0 - f64::from(t) / f64::from(spec.horizon)),
        ScheduleKind::Exponential | ScheduleKind::ReversedExponential => {
            spec.m0 * spec.r.powi(t as i32)
        }
    };
    raw.clamp(0.0, 1.0)
}

pub fn working_memory(m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("slope {m} outside [0,1]")));
    }
    Ok(1.0 - m)
}

/// Effective per-head slopes at epoch `t`; empty when the schedule has no bias.
pub fn effective_slopes(spec: &ScheduleSpec, base: &HeadSlopes, epoch: u32) -> Vec<f64> {
    if !spec.kind.has_bias() {
        return Vec::new();
    }
    let m = schedule_slope(spec, epoch);
    if spec.uniform_slope {
        vec![m; base.len()]
    } else {
        base.as_slice().iter().map(|s| s * m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityPoint {
    pub epoch: u32,
    pub m: f64,
    pub w: f64,
}

/// `(t, m_t, w_t)` for `t = 0..=horizon`. A schedule without bias reports
/// full capacity throughout.
pub fn capacity_curve(spec: &ScheduleSpec) -> Vec<CapacityPoint> {
    (0..=spec.horizon)
        .map(|t| {
            let m = if spec.kind.has_bias() {
                schedule_slope(spec, t)
            } else {
                0.0
            };
            CapacityPoint {
                epoch: t,
                m,
                w: 1.0 - m,
            }
        })
        .collect()
}

/// CSV with header `epoch,m,w`.
pub fn capacity_csv(curve: &[CapacityPoint]) -> String {
    let mut out = String::from("epoch,m,w\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.epoch, p.m, p.w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn exp(m0: f64, r: f64, t: u32) -> ScheduleSpec {
        ScheduleSpec::new(ScheduleKind::Exponential, m0, r, t).unwrap()
    }

    #[test]
    fn head_slope_examples() {
        let s8 = head_slopes(8).unwrap();
        let expected = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125];
        assert_eq!(s8.as_slice(), &expected);
        assert_eq!(head_slopes(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(head_slopes(4).unwrap().as_slice(), &[1.0, 0.25, 0.0625, 0.015625]);
        assert!(head_slopes(0).is_err());
    }

    #[test]
    fn bias_matrix_examples() {
        assert_eq!(bias_matrix(1).unwrap().to_dense(), vec![vec![0.0]]);
        let b = bias_matrix(3).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..=i).map(|j| b.get(i, j).unwrap()).collect())
            .collect();
        assert_eq!(rows, vec![vec![0.0], vec![-1.0, 0.0], vec![-2.0, -1.0, 0.0]]);
        assert_eq!(b.get(0, 1), None);
        assert!(b.to_dense()[0][2].is_infinite());
        assert!(bias_matrix(0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_slope(&exp(1.0, 0.6, 10), 0), 1.0);
        // 0.6^10 by repeated multiplication.
        let mut p = 1.0f64;
        for _ in 0..10 {
            p *= 0.6;
        }
        assert_abs_diff_eq!(schedule_slope(&exp(1.0, 0.6, 10), 10), p, epsilon = 1e-15);
        assert_abs_diff_eq!(p, 0.0060466176, epsilon = 1e-10);

        let lin = ScheduleSpec::new(ScheduleKind::Linear, 1.0, 1.0, 10).unwrap();
        assert_abs_diff_eq!(schedule_slope(&lin, 5), 0.5, epsilon = 1e-15);
        assert_eq!(schedule_slope(&lin, 10), 0.0);

        let rev = ScheduleSpec::new(ScheduleKind::ReversedExponential, 0.01, 1.668, 10).unwrap();
        assert_eq!(schedule_slope(&rev, 10), 1.0);
        assert!(0.01 * 1.668f64.powi(10) > 1.6);
    }

    #[test]
    fn static_and_clamping_past_horizon() {
        let st = ScheduleSpec::new(ScheduleKind::Static, 0.5, 1.0, 3).unwrap();
        for t in 0..10 {
            assert_eq!(schedule_slope(&st, t), 0.5);
        }
        let e = exp(1.0, 0.6, 3);
        assert_eq!(schedule_slope(&e, 7), schedule_slope(&e, 3));
    }

    #[test]
    fn snap_final_to_zero() {
        let mut e = exp(1.0, 0.6, 10);
        e.snap_final_to_zero = true;
        assert_eq!(schedule_slope(&e, 10), 0.0);
        assert_abs_diff_eq!(schedule_slope(&e, 9), 0.6f64.powi(9), epsilon = 1e-15);
    }

    #[test]
    fn working_memory_examples() {
        assert_eq!(working_memory(1.0).unwrap(), 0.0);
        assert_eq!(working_memory(0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(working_memory(0.0060466).unwrap(), 0.9939534, epsilon = 1e-12);
        assert!(working_memory(1.5).is_err());
        assert!(working_memory(-0.1).is_err());
    }

    #[test]
    fn capacity_curve_examples() {
        let st = ScheduleSpec::new(ScheduleKind::Static, 0.5, 1.0, 3).unwrap();
        let w: Vec<(u32, f64)> = capacity_curve(&st).iter().map(|p| (p.epoch, p.w)).collect();
        assert_eq!(w, vec![(0, 0.5), (1, 0.5), (2, 0.5), (3, 0.5)]);

        let c = capacity_curve(&exp(1.0, 0.6, 2));
        let expected = [0.0, 0.4, 0.64];
        for (p, e) in c.iter().zip(expected) {
            assert_abs_diff_eq!(p.w, e, epsilon = 1e-12);
        }

        let lin = ScheduleSpec::new(ScheduleKind::Linear, 1.0, 1.0, 2).unwrap();
        let ws: Vec<f64> = capacity_curve(&lin).iter().map(|p| p.w).collect();
        assert_eq!(ws, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn capacity_csv_rows() {
        let csv = capacity_csv(&capacity_curve(&exp(1.0, 0.6, 10)));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "epoch,m,w");
        let last_w: f64 = lines[11].split(',').nth(2).unwrap().parse().unwrap();
        assert_abs_diff_eq!(last_w, 0.9939534, epsilon = 1e-7);
    }

    #[test]
    fn effective_slopes_compose() {
        let base = head_slopes(4).unwrap();
        let e = exp(1.0, 0.5, 10);
        assert_eq!(effective_slopes(&e, &base, 1), vec![0.5, 0.125, 0.03125, 0.0078125]);
        let mut u = e;
        u.uniform_slope = true;
        assert_eq!(effective_slopes(&u, &base, 1), vec![0.5; 4]);
        assert!(effective_slopes(&ScheduleSpec::none(), &base, 0).is_empty());
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec::new(ScheduleKind::Exponential, 1.5, 0.6, 10).is_err());
        assert!(ScheduleSpec::new(ScheduleKind::Exponential, 1.0, 0.0, 10).is_err());
        assert!(ScheduleSpec::new(ScheduleKind::Exponential, 1.0, 0.6, 0).is_err());
    }

    #[test]
    fn reversed_mirrors_forward_over_ten_epochs() {
        // With 10 training epochs (t = 0..9) the reversed curve is the
        // forward curve read backwards: w_rev(t) ≈ w_fwd(9 - t).
        let fwd = exp(1.0, 0.6, 10);
        let rev = ScheduleSpec::new(ScheduleKind::ReversedExponential, 0.01, 1.668, 10).unwrap();
        for t in 0..=9 {
            let wf = 1.0 - schedule_slope(&fwd, 9 - t);
            let wr = 1.0 - schedule_slope(&rev, t);
            assert!((wf - wr).abs() < 0.01, "t={t}: {wf} vs {wr}");
        }
    }

    proptest! {
        #[test]
        fn exponential_monotone(m0 in 0.01f64..=1.0, r in 0.05f64..0.99, horizon in 2u32..40) {
            let s = exp(m0, r, horizon);
            for t in 1..=horizon {
                let (prev, cur) = (schedule_slope(&s, t - 1), schedule_slope(&s, t));
                if prev > 0.0 {
                    prop_assert!(cur < prev);
                    prop_assert!(1.0 - cur >= 1.0 - prev);
                    // w can only move by a representable step
                    if prev - cur > f64::EPSILON {
                        prop_assert!(1.0 - cur > 1.0 - prev);
                    }
                }
            }
        }

        #[test]
        fn capacity_monotone_by_kind(m0 in 0.01f64..=1.0, r in 0.05f64..0.99, horizon in 1u32..30) {
            let lin = ScheduleSpec::new(ScheduleKind::Linear, m0, 1.0, horizon).unwrap();
            let e = exp(m0, r, horizon);
            let rev = ScheduleSpec::new(ScheduleKind::ReversedExponential, m0, 1.0 / r, horizon).unwrap();
            for pair in capacity_curve(&lin).windows(2) {
                prop_assert!(pair[1].w >= pair[0].w);
            }
            for pair in capacity_curve(&e).windows(2) {
                prop_assert!(pair[1].w >= pair[0].w);
            }
            for pair in capacity_curve(&rev).windows(2) {
                prop_assert!(pair[1].w <= pair[0].w);
            }
        }

        #[test]
        fn bias_entries_exact(len in 1usize..=512, i_frac in 0.0f64..1.0, j_frac in 0.0f64..=1.0) {
            let b = bias_matrix(len).unwrap();
            let i = ((len - 1) as f64 * i_frac) as usize;
            let j = (i as f64 * j_frac) as usize;
            prop_assert_eq!(b.get(i, j).unwrap() + (i - j) as f64, 0.0);
        }
    }
}
