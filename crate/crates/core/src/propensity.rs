//! Propensity score estimation via weighted logistic regression, plus
//! temperature scaling of the resulting scores.
//!
//! The propensity score of a sample is the estimated probability that it
//! belongs to the treatment group (`z = 1`) given its covariates. The fit
//! minimises a weight-averaged negative log-likelihood with an L2 penalty
//! on the weights (bias unpenalised) using full-batch gradient descent
//! with backtracking line search, started from zero. The solver is
//! deterministic: the same data and configuration always produce the same
//! model.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::util::{clamp_unit, logit, sigmoid};

/// Sample weighting mode for the propensity fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweighting {
    /// Every sample has weight 1.
    None,
    /// Samples weighted inversely proportional to the frequency of their
    /// spurious label: `w_s = N / (2 * N_{z_s})`.
    Spurious,
}

impl std::fmt::Display for Reweighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reweighting::None => write!(f, "none"),
            Reweighting::Spurious => write!(f, "spurious"),
        }
    }
}

/// Gradient-descent settings for the logistic fits (propensity and the
/// leakage attackers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// L2 penalty on the weight vector.
    pub lambda_reg: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Iteration cap; exceeding it is reported, not fatal.
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { lambda_reg: 1.0, tolerance: 1e-8, max_iter: 5000 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Invalid(format!("lambda_reg must be finite and >= 0, got {}", self.lambda_reg)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample positive weights for the propensity fit.
#[derive(Debug, Clone)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn uniform(n: usize) -> Self {
        SampleWeights(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Spurious reweighting: `w_s = N / (2 * N_{z_s})`, so each group's total
/// weight is exactly `N / 2`.
pub fn compute_spurious_weights(z: &[u8]) -> Result<SampleWeights> {
    let n = z.len();
    let n1 = z.iter().filter(|&&v| v == 1).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Invalid("spurious reweighting requires both attribute values".into()));
    }
    let w1 = n as f64 / (2.0 * n1 as f64);
    let w0 = n as f64 / (2.0 * n0 as f64);
    Ok(SampleWeights(z.iter().map(|&v| if v == 1 { w1 } else { w0 }).collect()))
}

/// Fitted propensity model: linear weights plus the temperature applied
/// when producing scaled scores.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub w: Array1<f64>,
    pub b: f64,
    pub temperature: f64,
    pub reweighting: Reweighting,
}

impl PropensityModel {
    /// Same model with a different temperature attached.
    pub fn with_temperature(&self, t: f64) -> Self {
        PropensityModel { temperature: t, ..self.clone() }
    }

    /// Raw scores `sigmoid(w.x + b)` for each row, clamped inside (0, 1).
    pub fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        score(self, x)
    }

    /// Temperature-scaled scores for each row.
    pub fn scaled_scores(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        temperature_scale(&self.score(x)?, self.temperature)
    }
}

/// Fit result: the model plus solver diagnostics. A fit that hits the
/// iteration cap is still usable; `converged` records the outcome.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: PropensityModel,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss: f64,
}

/// Weight-averaged penalised negative log-likelihood:
/// `(1/N) * sum_s w_s * ce_s + (lambda/2) * |w|^2`.
pub fn objective(
    w: ArrayView1<'_, f64>,
    b: f64,
    x: ArrayView2<'_, f64>,
    z: &[u8],
    weights: &[f64],
    lambda_reg: f64,
) -> f64 {
    let n = x.nrows() as f64;
    let mut loss = 0.0;
    for (i, row) in x.outer_iter().enumerate() {
        let p = clamp_unit(sigmoid(row.dot(&w) + b));
        let ce = if z[i] == 1 { -p.ln() } else { -(1.0 - p).ln() };
        loss += weights[i] * ce;
    }
    loss / n + 0.5 * lambda_reg * w.dot(&w)
}

/// Analytic gradient of [`objective`] with respect to `(w, b)`.
pub fn objective_grad(
    w: ArrayView1<'_, f64>,
    b: f64,
    x: ArrayView2<'_, f64>,
    z: &[u8],
    weights: &[f64],
    lambda_reg: f64,
) -> (Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let mut gw = Array1::zeros(w.len());
    let mut gb = 0.0;
    for (i, row) in x.outer_iter().enumerate() {
        let p = sigmoid(row.dot(&w) + b);
        let r = weights[i] * (p - z[i] as f64);
        gw.scaled_add(r, &row);
        gb += r;
    }
    gw /= n;
    gw.scaled_add(lambda_reg, &w);
    (gw, gb / n)
}

/// Fit a propensity model on the full dataset with the requested
/// reweighting. Deterministic: zero initialisation, full-batch descent,
/// Armijo backtracking line search.
pub fn fit_propensity(
    ds: &Dataset,
    reweighting: Reweighting,
    solver: &SolverConfig,
) -> Result<FitOutcome> {
    solver.validate()?;
    if !ds.has_both_groups() {
        return Err(Error::Invalid("propensity fit requires both spurious groups".into()));
    }
    let weights = match reweighting {
        Reweighting::None => SampleWeights::uniform(ds.len()),
        Reweighting::Spurious => compute_spurious_weights(ds.z())?,
    };
    let (w, b, diag) = minimize(ds.x(), ds.z(), weights.as_slice(), solver);
    Ok(FitOutcome {
        model: PropensityModel { w, b, temperature: 1.0, reweighting },
        converged: diag.0,
        iterations: diag.1,
        grad_norm: diag.2,
        loss: diag.3,
    })
}

/// Fit a plain (unweighted) logistic regression on arbitrary features and
/// a binary target. Used by the leakage attackers.
pub(crate) fn fit_logistic(
    x: ArrayView2<'_, f64>,
    z: &[u8],
    solver: &SolverConfig,
) -> (Array1<f64>, f64) {
    let weights = vec![1.0; x.nrows()];
    let (w, b, _) = minimize(x, z, &weights, solver);
    (w, b)
}

fn minimize(
    x: ArrayView2<'_, f64>,
    z: &[u8],
    weights: &[f64],
    solver: &SolverConfig,
) -> (Array1<f64>, f64, (bool, usize, f64, f64)) {
    let d = x.ncols();
    let mut w = Array1::zeros(d);
    let mut b = 0.0;
    let mut loss = objective(w.view(), b, x, z, weights, solver.lambda_reg);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::NAN;
    // Armijo backtracking, warm-started from the previous accepted step.
    let mut step: f64 = 1.0;

    for iter in 0..solver.max_iter {
        iterations = iter;
        let (gw, gb) = objective_grad(w.view(), b, x, z, weights, solver.lambda_reg);
        grad_norm = (gw.dot(&gw) + gb * gb).sqrt();
        if grad_norm <= solver.tolerance {
            converged = true;
            break;
        }
        let g_sq = grad_norm * grad_norm;
        step = (step * 2.0).min(1e6);
        let mut accepted = false;
        for _ in 0..60 {
            let w_try = &w - &(step * &gw);
            let b_try = b - step * gb;
            let loss_try = objective(w_try.view(), b_try, x, z, weights, solver.lambda_reg);
            if loss_try <= loss - 1e-4 * step * g_sq {
                w = w_try;
                b = b_try;
                loss = loss_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Step underflow: no representable descent step remains.
            break;
        }
    }
    (w, b, (converged, iterations, grad_norm, loss))
}

/// Raw propensity scores for every row of `x`, clamped inside (0, 1).
pub fn score(model: &PropensityModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.w.len() {
        return Err(Error::DimMismatch { expected: model.w.len(), got: x.ncols() });
    }
    Ok(x.outer_iter()
        .map(|row| clamp_unit(sigmoid(row.dot(&model.w) + model.b)))
        .collect())
}

/// Temperature-scale scores: `q = sigmoid(logit(e) / t)`. `t = 1` is the
/// identity, `t < 1` sharpens, `t > 1` flattens toward 0.5; the map is
/// strictly monotone, so score ordering is preserved.
pub fn temperature_scale(e: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("temperature must be > 0, got {t}")));
    }
    e.iter()
        .map(|&v| {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("score {v} outside (0,1)")));
            }
            Ok(sigmoid(logit(clamp_unit(v)) / t))
        })
        .collect()
}
