//! Stage-1 matching engine: caliper filtering, pairwise distances,
//! nearest-neighbour pairing, and bidirectional assembly of the matched
//! dataset.
//!
//! The per-direction pipeline is: score with the fitted propensity model,
//! temperature-scale, drop samples whose scaled score falls outside
//! `[c, 1-c]` (fixed caliper), compute source-to-candidate distances, mask
//! pairs whose score gap exceeds `sigma * alpha` (std caliper), then match
//! each source to its nearest admissible candidate, with replacement.
//! Both spurious values take the source role in turn, so the matched
//! dataset holds between 0 and 2N pairs.

use std::collections::HashSet;
use std::path::Path;

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::propensity::{fit_propensity, FitOutcome, PropensityModel, Reweighting, SolverConfig};
use crate::util::fmt_g17;

/// Closeness measure between samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Squared Euclidean distance between covariate rows.
    Euclidean,
    /// Absolute difference of (temperature-scaled) propensity scores.
    Propensity,
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistanceMetric::Euclidean => write!(f, "euclidean"),
            DistanceMetric::Propensity => write!(f, "propensity"),
        }
    }
}

/// Which spurious value plays the source ("treatment") role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Z1ToZ0,
    Z0ToZ1,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Z1ToZ0 => "z1_to_z0",
            Direction::Z0ToZ1 => "z0_to_z1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "z1_to_z0" => Some(Direction::Z1ToZ0),
            "z0_to_z1" => Some(Direction::Z0ToZ1),
            _ => None,
        }
    }

    /// Spurious value of the source group.
    fn source_z(self) -> u8 {
        match self {
            Direction::Z1ToZ0 => 1,
            Direction::Z0ToZ1 => 0,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All Stage-1 hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub reweighting: Reweighting,
    /// Temperature applied to propensity scores before matching.
    pub temperature: f64,
    /// Fixed caliper: samples with scaled score outside `[c, 1-c]` are
    /// discarded. `c = 0` retains everything.
    pub fixed_caliper_c: f64,
    /// Std caliper: pairs with score gap above `sigma * alpha` are
    /// forbidden. `f64::INFINITY` disables the caliper.
    pub std_caliper_alpha: f64,
    pub metric: DistanceMetric,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        // Hybrid default: Euclidean closeness with a propensity-score gap
        // bound, the rule-of-thumb fixed caliper, no rescaling.
        MatchConfig {
            reweighting: Reweighting::None,
            temperature: 1.0,
            fixed_caliper_c: 0.1,
            std_caliper_alpha: 0.2,
            metric: DistanceMetric::Euclidean,
            seed: 0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.fixed_caliper_c >= 0.0 && self.fixed_caliper_c < 0.5) {
            return Err(Error::Invalid(format!(
                "fixed caliper must lie in [0, 0.5), got {}",
                self.fixed_caliper_c
            )));
        }
        if !(self.std_caliper_alpha > 0.0) {
            return Err(Error::Invalid(format!(
                "std caliper alpha must be > 0 or infinite, got {}",
                self.std_caliper_alpha
            )));
        }
        Ok(())
    }
}

/// One matched pair. `treatment_id` is the source sample of the
/// direction; both scores are temperature-scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treatment_id: String,
    pub control_id: String,
    pub direction: Direction,
    pub distance: f64,
    pub e_treatment: f64,
    pub e_control: f64,
}

/// A source sample that found no admissible partner, either because the
/// fixed caliper removed it or because every candidate was masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedSample {
    pub id: String,
    pub direction: Direction,
}

/// Number of source samples per direction that survived the fixed caliper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RetainedCounts {
    pub z1_to_z0: usize,
    pub z0_to_z1: usize,
}

/// The matched dataset D*: ordered pairs (both directions, `z1_to_z0`
/// first), per-direction retention counts, and the unmatched sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedDataset {
    pub pairs: Vec<MatchedPair>,
    pub retained_counts: RetainedCounts,
    pub unmatched: Vec<UnmatchedSample>,
}

impl MatchedDataset {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// How many times each dataset row appears across all pairs. This is
    /// the resampling multiplicity used for post-match balance and
    /// leakage on D*.
    pub fn multiplicities(&self, ds: &Dataset) -> Result<Vec<usize>> {
        pair_multiplicities(ds, &self.pairs)
    }
}

/// Multiplicity of each dataset row over a pair list.
pub fn pair_multiplicities(ds: &Dataset, pairs: &[MatchedPair]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; ds.len()];
    for p in pairs {
        for id in [&p.treatment_id, &p.control_id] {
            let row = ds
                .row_of(id)
                .ok_or_else(|| Error::Invalid(format!("pair references unknown id `{id}`")))?;
            counts[row] += 1;
        }
    }
    Ok(counts)
}

/// Indices of the scores inside `[c, 1-c]`, bounds inclusive.
pub fn apply_fixed_caliper(q: &[f64], c: f64) -> Result<Vec<usize>> {
    if !(0.0..0.5).contains(&c) {
        return Err(Error::Invalid(format!("fixed caliper must lie in [0, 0.5), got {c}")));
    }
    Ok((0..q.len()).filter(|&i| q[i] >= c && q[i] <= 1.0 - c).collect())
}

fn squared_euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(u, v)| {
            let d = u - v;
            d * d
        })
        .sum()
}

/// Source-by-candidate distance matrix. Euclidean entries are the squared
/// distance `(X_i - X_j)^T (X_i - X_j)`; propensity entries are
/// `|q_i - q_j|`. Rows are computed in parallel.
pub fn pairwise_distances(
    x_t: ArrayView2<'_, f64>,
    x_c: ArrayView2<'_, f64>,
    q_t: &[f64],
    q_c: &[f64],
    metric: DistanceMetric,
) -> Result<Array2<f64>> {
    if x_t.ncols() != x_c.ncols() {
        return Err(Error::DimMismatch { expected: x_t.ncols(), got: x_c.ncols() });
    }
    if q_t.len() != x_t.nrows() {
        return Err(Error::DimMismatch { expected: x_t.nrows(), got: q_t.len() });
    }
    if q_c.len() != x_c.nrows() {
        return Err(Error::DimMismatch { expected: x_c.nrows(), got: q_c.len() });
    }
    let mut m = Array2::zeros((x_t.nrows(), x_c.nrows()));
    m.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| match metric {
            DistanceMetric::Euclidean => {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = squared_euclidean(x_t.row(i), x_c.row(j));
                }
            }
            DistanceMetric::Propensity => {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = (q_t[i] - q_c[j]).abs();
                }
            }
        });
    Ok(m)
}

/// Mask entries whose propensity-score gap exceeds `sigma * alpha` with
/// infinity. An infinite `alpha` leaves the matrix unchanged.
pub fn apply_std_caliper(m: &mut Array2<f64>, q_t: &[f64], q_c: &[f64], alpha: f64, sigma: f64) {
    if alpha.is_infinite() {
        return;
    }
    let bound = sigma * alpha;
    for ((i, j), slot) in m.indexed_iter_mut() {
        if (q_t[i] - q_c[j]).abs() > bound {
            *slot = f64::INFINITY;
        }
    }
}

/// Population (1/n) standard deviation.
pub(crate) fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Match each source row to its closest candidate, with replacement.
/// Ties break toward the lower candidate index; rows with no finite entry
/// are returned as unmatched.
pub fn nearest_neighbor_match(
    m: ArrayView2<'_, f64>,
    t_ids: &[&str],
    c_ids: &[&str],
    q_t: &[f64],
    q_c: &[f64],
    direction: Direction,
) -> (Vec<MatchedPair>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (i, row) in m.outer_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &d) in row.iter().enumerate() {
            if d.is_finite() && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) => pairs.push(MatchedPair {
                treatment_id: t_ids[i].to_string(),
                control_id: c_ids[j].to_string(),
                direction,
                distance: d,
                e_treatment: q_t[i],
                e_control: q_c[j],
            }),
            None => unmatched.push(t_ids[i].to_string()),
        }
    }
    (pairs, unmatched)
}

/// Outcome of matching in a single direction.
#[derive(Debug, Clone)]
pub struct DirectionMatch {
    pub pairs: Vec<MatchedPair>,
    /// Source ids without a pair (caliper-dropped or fully masked), in
    /// dataset row order.
    pub unmatched: Vec<String>,
    /// Source samples surviving the fixed caliper.
    pub retained_sources: usize,
    /// Candidate samples surviving the fixed caliper.
    pub retained_candidates: usize,
}

/// Run the full per-direction pipeline with an already-fitted model. The
/// temperature comes from `config`; the same scaled scores drive the
/// caliper, the propensity metric, and the pair records.
pub fn match_direction(
    ds: &Dataset,
    model: &PropensityModel,
    config: &MatchConfig,
    direction: Direction,
) -> Result<DirectionMatch> {
    config.validate()?;
    let q = model.with_temperature(config.temperature).scaled_scores(ds.x())?;
    let src_z = direction.source_z();
    let src_rows = ds.rows_with_z(src_z);
    let cand_rows = ds.rows_with_z(1 - src_z);
    let ret_src = retain_rows(&src_rows, &q, config.fixed_caliper_c);
    let ret_cand = retain_rows(&cand_rows, &q, config.fixed_caliper_c);
    let sigma = retained_union_std(&ret_src, &ret_cand, &q);
    run_direction(ds, &q, &src_rows, &ret_src, &ret_cand, sigma, config, direction, None)
}

/// Fit one propensity model and match in both directions with the same
/// configuration. Solver diagnostics are dropped here; use [`MatchEngine`]
/// to inspect them.
pub fn match_bidirectional(
    ds: &Dataset,
    config: &MatchConfig,
    solver: &SolverConfig,
) -> Result<MatchedDataset> {
    let mut engine = MatchEngine::new(ds, solver.clone())?;
    engine.run(config)
}

fn retain_rows(rows: &[usize], q: &[f64], c: f64) -> Vec<usize> {
    rows.iter().copied().filter(|&r| q[r] >= c && q[r] <= 1.0 - c).collect()
}

fn retained_union_std(ret_a: &[usize], ret_b: &[usize], q: &[f64]) -> f64 {
    let union: Vec<f64> = ret_a.iter().chain(ret_b.iter()).map(|&r| q[r]).collect();
    population_std(&union)
}

/// Distance source for one direction: either computed on the spot or
/// gathered from a cached full treatment-by-control matrix.
enum DistanceSource<'a> {
    /// Cached matrix plus each retained row's position inside it.
    Cached { full: &'a Array2<f64>, src_pos: Vec<usize>, cand_pos: Vec<usize>, transposed: bool },
}

#[allow(clippy::too_many_arguments)]
fn run_direction(
    ds: &Dataset,
    q: &[f64],
    src_rows: &[usize],
    ret_src: &[usize],
    ret_cand: &[usize],
    sigma: f64,
    config: &MatchConfig,
    direction: Direction,
    cached: Option<DistanceSource<'_>>,
) -> Result<DirectionMatch> {
    let q_src: Vec<f64> = ret_src.iter().map(|&r| q[r]).collect();
    let q_cand: Vec<f64> = ret_cand.iter().map(|&r| q[r]).collect();

    let mut m = match cached {
        Some(DistanceSource::Cached { full, src_pos, cand_pos, transposed }) => {
            let mut m = Array2::zeros((ret_src.len(), ret_cand.len()));
            for (i, slot_row) in m.outer_iter_mut().enumerate() {
                for (j, slot) in slot_row.into_iter().enumerate() {
                    *slot = if transposed {
                        full[[cand_pos[j], src_pos[i]]]
                    } else {
                        full[[src_pos[i], cand_pos[j]]]
                    };
                }
            }
            m
        }
        None => {
            let x = ds.x();
            let x_src = x.select(Axis(0), ret_src);
            let x_cand = x.select(Axis(0), ret_cand);
            pairwise_distances(x_src.view(), x_cand.view(), &q_src, &q_cand, config.metric)?
        }
    };
    apply_std_caliper(&mut m, &q_src, &q_cand, config.std_caliper_alpha, sigma);

    let src_ids: Vec<&str> = ret_src.iter().map(|&r| ds.ids()[r].as_str()).collect();
    let cand_ids: Vec<&str> = ret_cand.iter().map(|&r| ds.ids()[r].as_str()).collect();
    let (pairs, nn_unmatched) =
        nearest_neighbor_match(m.view(), &src_ids, &cand_ids, &q_src, &q_cand, direction);

    // Sources missing from the match, in dataset row order, whether the
    // fixed caliper removed them or every candidate was masked.
    let retained_set: HashSet<usize> = ret_src.iter().copied().collect();
    let nn_missing: HashSet<&str> = nn_unmatched.iter().map(String::as_str).collect();
    let unmatched: Vec<String> = src_rows
        .iter()
        .filter(|r| !retained_set.contains(r) || nn_missing.contains(ds.ids()[**r].as_str()))
        .map(|&r| ds.ids()[r].clone())
        .collect();

    Ok(DirectionMatch {
        pairs,
        unmatched,
        retained_sources: ret_src.len(),
        retained_candidates: ret_cand.len(),
    })
}

/// Entries above this are not cached (the full matrix would be too large)
/// and distances are recomputed per configuration instead.
const DISTANCE_CACHE_MAX_ENTRIES: usize = 16_000_000;

/// Reusable matching context. Propensity fits (one per reweighting mode)
/// and the full cross-group Euclidean matrix are computed once and shared
/// across configurations, which is what makes the Stage-1 grid search
/// cheap. `prepare` warms the caches; afterwards `run_prepared` is
/// read-only and safe to call from parallel workers.
pub struct MatchEngine<'a> {
    ds: &'a Dataset,
    solver: SolverConfig,
    t_rows: Vec<usize>,
    c_rows: Vec<usize>,
    pos_in_t: Vec<usize>,
    pos_in_c: Vec<usize>,
    fit_none: Option<FitOutcome>,
    fit_spurious: Option<FitOutcome>,
    euclidean: Option<Array2<f64>>,
}

impl<'a> MatchEngine<'a> {
    pub fn new(ds: &'a Dataset, solver: SolverConfig) -> Result<Self> {
        solver.validate()?;
        if !ds.has_both_groups() {
            return Err(Error::Invalid("matching requires both spurious groups".into()));
        }
        let t_rows = ds.rows_with_z(1);
        let c_rows = ds.rows_with_z(0);
        let mut pos_in_t = vec![usize::MAX; ds.len()];
        let mut pos_in_c = vec![usize::MAX; ds.len()];
        for (pos, &r) in t_rows.iter().enumerate() {
            pos_in_t[r] = pos;
        }
        for (pos, &r) in c_rows.iter().enumerate() {
            pos_in_c[r] = pos;
        }
        Ok(MatchEngine {
            ds,
            solver,
            t_rows,
            c_rows,
            pos_in_t,
            pos_in_c,
            fit_none: None,
            fit_spurious: None,
            euclidean: None,
        })
    }

    /// Warm every cache the given configurations will need.
    pub fn prepare(&mut self, configs: &[MatchConfig]) -> Result<()> {
        for cfg in configs {
            cfg.validate()?;
            self.ensure_fit(cfg.reweighting)?;
        }
        let want_euclidean = configs.iter().any(|c| c.metric == DistanceMetric::Euclidean);
        if want_euclidean
            && self.euclidean.is_none()
            && self.t_rows.len().saturating_mul(self.c_rows.len()) <= DISTANCE_CACHE_MAX_ENTRIES
        {
            let x = self.ds.x();
            let x_t = x.select(Axis(0), &self.t_rows);
            let x_c = x.select(Axis(0), &self.c_rows);
            let dummy_t = vec![0.0; self.t_rows.len()];
            let dummy_c = vec![0.0; self.c_rows.len()];
            self.euclidean = Some(pairwise_distances(
                x_t.view(),
                x_c.view(),
                &dummy_t,
                &dummy_c,
                DistanceMetric::Euclidean,
            )?);
        }
        Ok(())
    }

    fn ensure_fit(&mut self, reweighting: Reweighting) -> Result<()> {
        let slot = match reweighting {
            Reweighting::None => &mut self.fit_none,
            Reweighting::Spurious => &mut self.fit_spurious,
        };
        if slot.is_none() {
            *slot = Some(fit_propensity(self.ds, reweighting, &self.solver)?);
        }
        Ok(())
    }

    fn fit_for(&self, reweighting: Reweighting) -> Option<&FitOutcome> {
        match reweighting {
            Reweighting::None => self.fit_none.as_ref(),
            Reweighting::Spurious => self.fit_spurious.as_ref(),
        }
    }

    /// Solver warnings for any cached fit that hit the iteration cap.
    pub fn warnings(&self) -> Vec<String> {
        [&self.fit_none, &self.fit_spurious]
            .into_iter()
            .flatten()
            .filter(|f| !f.converged)
            .map(|f| {
                format!(
                    "propensity fit ({}) stopped after {} iterations with gradient norm {:.3e}",
                    f.model.reweighting, f.iterations, f.grad_norm
                )
            })
            .collect()
    }

    /// Match in both directions, fitting anything not yet cached.
    pub fn run(&mut self, config: &MatchConfig) -> Result<MatchedDataset> {
        config.validate()?;
        self.ensure_fit(config.reweighting)?;
        self.run_prepared(config)
    }

    /// Match in both directions using only cached fits; call [`prepare`]
    /// first. Pairs from `z1_to_z0` come first, then `z0_to_z1`.
    ///
    /// [`prepare`]: MatchEngine::prepare
    pub fn run_prepared(&self, config: &MatchConfig) -> Result<MatchedDataset> {
        config.validate()?;
        let fit = self.fit_for(config.reweighting).ok_or_else(|| {
            Error::Invalid(format!("no cached propensity fit for reweighting `{}`", config.reweighting))
        })?;
        let q = fit.model.with_temperature(config.temperature).scaled_scores(self.ds.x())?;
        let ret_t = retain_rows(&self.t_rows, &q, config.fixed_caliper_c);
        let ret_c = retain_rows(&self.c_rows, &q, config.fixed_caliper_c);
        let sigma = retained_union_std(&ret_t, &ret_c, &q);

        let mut out_pairs = Vec::new();
        let mut out_unmatched = Vec::new();
        let mut retained_counts = RetainedCounts::default();

        for direction in [Direction::Z1ToZ0, Direction::Z0ToZ1] {
            let (src_rows, ret_src, ret_cand) = match direction {
                Direction::Z1ToZ0 => (&self.t_rows, &ret_t, &ret_c),
                Direction::Z0ToZ1 => (&self.c_rows, &ret_c, &ret_t),
            };
            let cached = match (config.metric, &self.euclidean) {
                (DistanceMetric::Euclidean, Some(full)) => {
                    let transposed = direction == Direction::Z0ToZ1;
                    let (src_pos_of, cand_pos_of) = if transposed {
                        (&self.pos_in_c, &self.pos_in_t)
                    } else {
                        (&self.pos_in_t, &self.pos_in_c)
                    };
                    Some(DistanceSource::Cached {
                        full,
                        src_pos: ret_src.iter().map(|&r| src_pos_of[r]).collect(),
                        cand_pos: ret_cand.iter().map(|&r| cand_pos_of[r]).collect(),
                        transposed,
                    })
                }
                _ => None,
            };
            let dm = run_direction(self.ds, &q, src_rows, ret_src, ret_cand, sigma, config, direction, cached)?;
            match direction {
                Direction::Z1ToZ0 => retained_counts.z1_to_z0 = dm.retained_sources,
                Direction::Z0ToZ1 => retained_counts.z0_to_z1 = dm.retained_sources,
            }
            out_pairs.extend(dm.pairs);
            out_unmatched.extend(dm.unmatched.into_iter().map(|id| UnmatchedSample { id, direction }));
        }

        Ok(MatchedDataset { pairs: out_pairs, retained_counts, unmatched: out_unmatched })
    }
}

/// Write pairs as CSV with 17-significant-digit numeric rendering.
pub fn write_pairs_csv(md: &MatchedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["treatment_id", "control_id", "direction", "distance", "e_treatment", "e_control"])
        .and_then(|_| {
            for p in &md.pairs {
                w.write_record([
                    p.treatment_id.as_str(),
                    p.control_id.as_str(),
                    p.direction.as_str(),
                    &fmt_g17(p.distance),
                    &fmt_g17(p.e_treatment),
                    &fmt_g17(p.e_control),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::format(path, e))
}

/// Write the unmatched sidecar (`id,direction`).
pub fn write_unmatched_csv(md: &MatchedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["id", "direction"])
        .and_then(|_| {
            for u in &md.unmatched {
                w.write_record([u.id.as_str(), u.direction.as_str()])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::format(path, e))
}

/// Read a pairs CSV produced by [`write_pairs_csv`].
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<MatchedPair>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::header(path, format!("{other:?}")),
        })?;
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) => {
            let expected = ["treatment_id", "control_id", "direction", "distance", "e_treatment", "e_control"];
            if h.len() != expected.len() || h.iter().zip(expected).any(|(a, b)| a != b) {
                return Err(Error::header(path, "expected `treatment_id,control_id,direction,distance,e_treatment,e_control`"));
            }
        }
        Some(Err(e)) => return Err(Error::header(path, e.to_string())),
        None => return Err(Error::header(path, "empty file")),
    }
    let mut pairs = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::row(path, row, e.to_string()))?;
        if rec.len() != 6 {
            return Err(Error::row(path, row, format!("expected 6 fields, found {}", rec.len())));
        }
        let direction = Direction::parse(&rec[2])
            .ok_or_else(|| Error::row(path, row, format!("unknown direction `{}`", &rec[2])))?;
        let parse_f = |field: usize, name: &str| -> Result<f64> {
            rec[field]
                .parse()
                .map_err(|_| Error::row(path, row, format!("{name} value `{}` is not a real number", &rec[field])))
        };
        pairs.push(MatchedPair {
            treatment_id: rec[0].to_string(),
            control_id: rec[1].to_string(),
            direction,
            distance: parse_f(3, "distance")?,
            e_treatment: parse_f(4, "e_treatment")?,
            e_control: parse_f(5, "e_control")?,
        });
    }
    Ok(pairs)
}
