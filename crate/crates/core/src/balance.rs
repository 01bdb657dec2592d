//! Covariate balance diagnostics (standardized mean difference and
//! variance ratio) and the Stage-1 grid search that selects a matching
//! configuration by covariate balance.
//!
//! Conventions: variances are unbiased (n-1). A group whose total weight
//! is below 2 contributes a variance of 0, and the corresponding variance
//! ratio is reported as an undefined sentinel (NaN, rendered `null` in
//! JSON) while still being bucketed deterministically. SMD buckets are
//! `<=0.1`, `(0.1, 0.2)`, `>=0.2`; VR buckets are `<=4/5`, `(4/5, 5/4)`,
//! `>=5/4`, boundaries inclusive in the outer buckets.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::{pair_multiplicities, MatchConfig, MatchEngine, MatchedPair};
use crate::propensity::{Reweighting, SolverConfig};

/// SMD bucket counts, boundaries inclusive in `le` and `ge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SmdBuckets {
    #[serde(rename = "le_0.1")]
    pub le: usize,
    pub mid: usize,
    #[serde(rename = "ge_0.2")]
    pub ge: usize,
}

/// VR bucket counts, boundaries inclusive in `le` and `ge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VrBuckets {
    #[serde(rename = "le_4/5")]
    pub le: usize,
    pub mid: usize,
    #[serde(rename = "ge_5/4")]
    pub ge: usize,
}

/// Per-covariate balance of a (possibly weighted) dataset across the two
/// spurious groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub smd: Vec<f64>,
    pub vr: Vec<f64>,
    pub smd_buckets: SmdBuckets,
    pub vr_buckets: VrBuckets,
    pub n_treatment: usize,
    pub n_control: usize,
}

impl std::fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "SMD  <=0.1: {}  (0.1,0.2): {}  >=0.2: {}",
            self.smd_buckets.le, self.smd_buckets.mid, self.smd_buckets.ge
        )?;
        write!(
            f,
            "VR   <=4/5: {}  (4/5,5/4): {}  >=5/4: {}",
            self.vr_buckets.le, self.vr_buckets.mid, self.vr_buckets.ge
        )
    }
}

/// Weighted first and second moments: total weight, mean, and unbiased
/// variance (`0` when the total weight is below 2).
fn weighted_moments(values: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64, f64) {
    let mut w_total = 0.0;
    let mut sum = 0.0;
    for (v, w) in values.clone() {
        w_total += w;
        sum += w * v;
    }
    if w_total == 0.0 {
        return (0.0, f64::NAN, 0.0);
    }
    let mean = sum / w_total;
    if w_total < 2.0 {
        return (w_total, mean, 0.0);
    }
    let ss: f64 = values.map(|(v, w)| w * (v - mean) * (v - mean)).sum();
    (w_total, mean, ss / (w_total - 1.0))
}

/// Absolute standardized mean difference of one covariate:
/// `|mean_T - mean_C| / sqrt((var_T + var_C) / 2)`. Returns 0 when both
/// the pooled deviation is zero and the means agree, `+inf` when the
/// pooled deviation is zero but the means differ, and NaN on an empty
/// group.
pub fn smd(a_t: &[f64], a_c: &[f64]) -> f64 {
    if a_t.is_empty() || a_c.is_empty() {
        return f64::NAN;
    }
    let (_, m_t, v_t) = weighted_moments(a_t.iter().map(|&v| (v, 1.0)));
    let (_, m_c, v_c) = weighted_moments(a_c.iter().map(|&v| (v, 1.0)));
    smd_from_moments(m_t, v_t, m_c, v_c)
}

fn smd_from_moments(m_t: f64, v_t: f64, m_c: f64, v_c: f64) -> f64 {
    let pooled = ((v_t + v_c) / 2.0).sqrt();
    if pooled == 0.0 {
        if m_t == m_c {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (m_t - m_c).abs() / pooled
    }
}

/// Variance ratio `var_T / var_C` of one covariate with unbiased
/// variances. A zero denominator yields `+inf` unless the numerator is
/// also zero, in which case 1 is reported. Groups with fewer than two
/// samples make the ratio undefined: NaN is returned.
pub fn variance_ratio(a_t: &[f64], a_c: &[f64]) -> f64 {
    let (w_t, _, v_t) = weighted_moments(a_t.iter().map(|&v| (v, 1.0)));
    let (w_c, _, v_c) = weighted_moments(a_c.iter().map(|&v| (v, 1.0)));
    if w_t < 2.0 || w_c < 2.0 {
        return f64::NAN;
    }
    vr_from_variances(v_t, v_c)
}

fn vr_from_variances(v_t: f64, v_c: f64) -> f64 {
    if v_c == 0.0 {
        if v_t == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        v_t / v_c
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bucket {
    Le,
    Mid,
    Ge,
}

fn bucket_smd(v: f64) -> Bucket {
    if v <= 0.1 {
        Bucket::Le
    } else if v >= 0.2 {
        Bucket::Ge
    } else {
        Bucket::Mid
    }
}

fn bucket_vr(v: f64) -> Bucket {
    if v <= 4.0 / 5.0 {
        Bucket::Le
    } else if v >= 5.0 / 4.0 {
        Bucket::Ge
    } else {
        Bucket::Mid
    }
}

/// Per-covariate balance across the two groups. `weights`, when given,
/// holds resampling multiplicities: a sample enters the statistics once
/// per matched pair it belongs to.
pub fn balance_report(
    x: ArrayView2<'_, f64>,
    groups: &[u8],
    weights: Option<&[usize]>,
) -> Result<BalanceReport> {
    let n = x.nrows();
    if groups.len() != n {
        return Err(Error::DimMismatch { expected: n, got: groups.len() });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimMismatch { expected: n, got: w.len() });
        }
    }
    let weight_of = |i: usize| weights.map_or(1.0, |w| w[i] as f64);
    let n_treatment: f64 = (0..n).filter(|&i| groups[i] == 1).map(weight_of).sum();
    let n_control: f64 = (0..n).filter(|&i| groups[i] == 0).map(weight_of).sum();
    if n_treatment == 0.0 || n_control == 0.0 {
        return Err(Error::Invalid("balance requires samples in both groups".into()));
    }

    let d = x.ncols();
    let mut smd_vals = Vec::with_capacity(d);
    let mut vr_vals = Vec::with_capacity(d);
    let mut smd_buckets = SmdBuckets::default();
    let mut vr_buckets = VrBuckets::default();
    for j in 0..d {
        let col = x.column(j);
        let group_vals = |g: u8| {
            (0..n)
                .filter(move |&i| groups[i] == g && weight_of(i) > 0.0)
                .map(move |i| (col[i], weight_of(i)))
        };
        let (w_t, m_t, v_t) = weighted_moments(group_vals(1));
        let (w_c, m_c, v_c) = weighted_moments(group_vals(0));

        let s = smd_from_moments(m_t, v_t, m_c, v_c);
        match bucket_smd(s) {
            Bucket::Le => smd_buckets.le += 1,
            Bucket::Mid => smd_buckets.mid += 1,
            Bucket::Ge => smd_buckets.ge += 1,
        }
        smd_vals.push(s);

        // The bucket always follows the zero-variance convention; the
        // reported value is the undefined sentinel when a group has fewer
        // than two (weighted) samples.
        let effective = vr_from_variances(v_t, v_c);
        let reported = if w_t < 2.0 || w_c < 2.0 { f64::NAN } else { effective };
        match bucket_vr(effective) {
            Bucket::Le => vr_buckets.le += 1,
            Bucket::Mid => vr_buckets.mid += 1,
            Bucket::Ge => vr_buckets.ge += 1,
        }
        vr_vals.push(reported);
    }

    Ok(BalanceReport {
        smd: smd_vals,
        vr: vr_vals,
        smd_buckets,
        vr_buckets,
        n_treatment: n_treatment.round() as usize,
        n_control: n_control.round() as usize,
    })
}

/// Balance of the matched dataset D*: each sample counts once per pair it
/// appears in.
pub fn matched_balance_report(ds: &Dataset, pairs: &[MatchedPair]) -> Result<BalanceReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("cannot assess balance of an empty matched set".into()));
    }
    let mult = pair_multiplicities(ds, pairs)?;
    balance_report(ds.x(), ds.z(), Some(&mult))
}

/// One grid-search row: the configuration, its matched-set size, and the
/// post-match balance (absent when no pair survived).
#[derive(Debug, Clone)]
pub struct GridSearchEntry {
    pub config: MatchConfig,
    /// Position in the input grid, used as the final tie-break.
    pub config_index: usize,
    pub n_pairs: usize,
    pub report: Option<BalanceReport>,
    pub note: Option<String>,
}

/// Run `match_bidirectional` plus a post-match balance report for every
/// configuration and rank the results: most covariates with SMD <= 0.1
/// first, then most covariates with VR inside (4/5, 5/4), then the larger
/// matched set, then grid order. Configurations with an empty matched set
/// rank last with a diagnostic note.
pub fn grid_search_stage1(
    ds: &Dataset,
    grid: &[MatchConfig],
    solver: &SolverConfig,
) -> Result<Vec<GridSearchEntry>> {
    if grid.is_empty() {
        return Err(Error::Invalid("grid search requires at least one configuration".into()));
    }
    let mut engine = MatchEngine::new(ds, solver.clone())?;
    engine.prepare(grid)?;
    let engine = &engine;
    let mut entries = grid
        .par_iter()
        .enumerate()
        .map(|(config_index, config)| -> Result<GridSearchEntry> {
            let md = engine.run_prepared(config)?;
            let n_pairs = md.pairs.len();
            let (report, note) = if md.is_empty() {
                (None, Some("empty matched set".to_string()))
            } else {
                (Some(matched_balance_report(ds, &md.pairs)?), None)
            };
            Ok(GridSearchEntry { config: config.clone(), config_index, n_pairs, report, note })
        })
        .collect::<Result<Vec<_>>>()?;

    entries.sort_by_key(|e| {
        let (smd_le, vr_mid) = e
            .report
            .as_ref()
            .map_or((0, 0), |r| (r.smd_buckets.le, r.vr_buckets.mid));
        (
            e.report.is_none(),
            std::cmp::Reverse(smd_le),
            std::cmp::Reverse(vr_mid),
            std::cmp::Reverse(e.n_pairs),
            e.config_index,
        )
    });
    Ok(entries)
}

/// The full Stage-1 sweep: both reweighting modes, temperatures 0.6 to
/// 1.3 in steps of 0.05, fixed calipers {0.1, 0.05, 0}, std calipers
/// {0.2, 0.4, 0.6, none}, Euclidean closeness.
pub fn default_grid(seed: u64) -> Vec<MatchConfig> {
    let mut grid = Vec::new();
    for reweighting in [Reweighting::None, Reweighting::Spurious] {
        for t_hundredths in (60..=130).step_by(5) {
            for c in [0.1, 0.05, 0.0] {
                for alpha in [0.2, 0.4, 0.6, f64::INFINITY] {
                    grid.push(MatchConfig {
                        reweighting,
                        temperature: t_hundredths as f64 / 100.0,
                        fixed_caliper_c: c,
                        std_caliper_alpha: alpha,
                        metric: crate::matching::DistanceMetric::Euclidean,
                        seed,
                    });
                }
            }
        }
    }
    grid
}

/// The narrower sweep used for many-class leakage experiments: spurious
/// reweighting, temperatures 0.6 to 1.0 in steps of 0.1, fixed calipers
/// {0, 0.1}, std caliper 0.2.
pub fn imsitu_grid(seed: u64) -> Vec<MatchConfig> {
    let mut grid = Vec::new();
    for t_tenths in 6..=10 {
        for c in [0.0, 0.1] {
            grid.push(MatchConfig {
                reweighting: Reweighting::Spurious,
                temperature: t_tenths as f64 / 10.0,
                fixed_caliper_c: c,
                std_caliper_alpha: 0.2,
                metric: crate::matching::DistanceMetric::Euclidean,
                seed,
            });
        }
    }
    grid
}
