//! Subgroup-robust metrics and attribute-leakage probes.
//!
//! Robust accuracy is the lowest accuracy across the non-empty `(y, z)`
//! subgroups; the robust gap is the spread between the best and worst
//! subgroup. Leakage is the held-out accuracy of a deterministic logistic
//! attacker predicting the spurious attribute, either from one-hot true
//! labels (dataset leakage) or from a classifier's output probabilities
//! (model leakage), on a seeded 80/20 split.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::propensity::{fit_logistic, SolverConfig};
use crate::train::Classifier;
use crate::util::sigmoid;

/// Accuracy of one `(y, z)` subgroup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupAccuracy {
    pub y: usize,
    pub z: u8,
    pub accuracy: f64,
    pub n: usize,
}

/// Aggregate, worst-subgroup, and spread accuracies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustMetrics {
    pub aggregate_accuracy: f64,
    pub robust_accuracy: f64,
    pub robust_gap: f64,
    pub subgroup_accuracy: Vec<SubgroupAccuracy>,
}

/// Per-subgroup accuracies over the non-empty `(y_true, z)` cells.
pub fn robust_metrics(y_true: &[usize], y_pred: &[usize], z: &[u8]) -> Result<RobustMetrics> {
    let n = y_true.len();
    if n == 0 {
        return Err(Error::Invalid("metrics require at least one sample".into()));
    }
    if y_pred.len() != n {
        return Err(Error::DimMismatch { expected: n, got: y_pred.len() });
    }
    if z.len() != n {
        return Err(Error::DimMismatch { expected: n, got: z.len() });
    }
    let mut cells: std::collections::BTreeMap<(usize, u8), (usize, usize)> =
        std::collections::BTreeMap::new();
    let mut correct_total = 0usize;
    for i in 0..n {
        let cell = cells.entry((y_true[i], z[i])).or_insert((0, 0));
        cell.1 += 1;
        if y_true[i] == y_pred[i] {
            cell.0 += 1;
            correct_total += 1;
        }
    }
    let subgroup_accuracy: Vec<SubgroupAccuracy> = cells
        .into_iter()
        .map(|((y, zv), (correct, count))| SubgroupAccuracy {
            y,
            z: zv,
            accuracy: correct as f64 / count as f64,
            n: count,
        })
        .collect();
    let min = subgroup_accuracy.iter().map(|s| s.accuracy).fold(f64::INFINITY, f64::min);
    let max = subgroup_accuracy.iter().map(|s| s.accuracy).fold(f64::NEG_INFINITY, f64::max);
    Ok(RobustMetrics {
        aggregate_accuracy: correct_total as f64 / n as f64,
        robust_accuracy: min,
        robust_gap: max - min,
        subgroup_accuracy,
    })
}

/// Train the attacker on a seeded 80% split and score it on the rest.
/// A split whose training part misses one attribute value is reshuffled
/// with the next seed, up to 10 attempts.
fn attacker_accuracy(
    features: ArrayView2<'_, f64>,
    z: &[u8],
    split_seed: u64,
    solver: &SolverConfig,
) -> Result<f64> {
    let n = features.nrows();
    if z.len() != n {
        return Err(Error::DimMismatch { expected: n, got: z.len() });
    }
    let n_train = n * 4 / 5;
    if n_train == 0 || n_train == n {
        return Err(Error::Invalid(format!("cannot build an 80/20 split from {n} samples")));
    }
    const MAX_ATTEMPTS: usize = 10;
    for attempt in 0..MAX_ATTEMPTS {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed.wrapping_add(attempt as u64));
        order.shuffle(&mut rng);
        let (train_idx, eval_idx) = order.split_at(n_train);
        let has = |v: u8| train_idx.iter().any(|&i| z[i] == v);
        if !(has(0) && has(1)) {
            continue;
        }
        let x_train = features.select(ndarray::Axis(0), train_idx);
        let z_train: Vec<u8> = train_idx.iter().map(|&i| z[i]).collect();
        let (w, b) = fit_logistic(x_train.view(), &z_train, solver);
        let correct = eval_idx
            .iter()
            .filter(|&&i| {
                let p = sigmoid(features.row(i).dot(&w) + b);
                let pred: u8 = if p >= 0.5 { 1 } else { 0 };
                pred == z[i]
            })
            .count();
        return Ok(correct as f64 / eval_idx.len() as f64);
    }
    Err(Error::DegenerateSplit { attempts: MAX_ATTEMPTS })
}

fn one_hot(y: &[usize]) -> Array2<f64> {
    let k = y.iter().copied().max().unwrap_or(0) + 1;
    let mut out = Array2::zeros((y.len(), k));
    for (i, &label) in y.iter().enumerate() {
        out[[i, label]] = 1.0;
    }
    out
}

/// Held-out accuracy of predicting the spurious attribute from one-hot
/// true labels.
pub fn dataset_leakage(y: &[usize], z: &[u8], split_seed: u64, solver: &SolverConfig) -> Result<f64> {
    if y.len() != z.len() {
        return Err(Error::DimMismatch { expected: y.len(), got: z.len() });
    }
    if !(z.contains(&0) && z.contains(&1)) {
        return Err(Error::Invalid("leakage requires both attribute values".into()));
    }
    attacker_accuracy(one_hot(y).view(), z, split_seed, solver)
}

/// Held-out accuracy of predicting the spurious attribute from the
/// classifier's output probabilities.
pub fn model_leakage(
    clf: &Classifier,
    x: ArrayView2<'_, f64>,
    z: &[u8],
    split_seed: u64,
    solver: &SolverConfig,
) -> Result<f64> {
    if x.nrows() != z.len() {
        return Err(Error::DimMismatch { expected: x.nrows(), got: z.len() });
    }
    if !(z.contains(&0) && z.contains(&1)) {
        return Err(Error::Invalid("leakage requires both attribute values".into()));
    }
    let probs = clf.probabilities(x)?;
    attacker_accuracy(probs.view(), z, split_seed, solver)
}

/// Per-repeat leakage values with their mean and sample deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl LeakageSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        LeakageSummary { values, mean, std }
    }
}

/// Dataset and (optionally) model leakage over repeated splits; repeat
/// `i` uses `split_seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageReport {
    pub dataset_leakage: LeakageSummary,
    pub model_leakage: Option<LeakageSummary>,
    pub attacker_config: SolverConfig,
    /// Held-out evaluation count per repeat.
    pub n_eval: usize,
}

/// Assemble a [`LeakageReport`]. `model` supplies the classifier and its
/// input features for model leakage; pass `None` for dataset-only runs.
pub fn leakage_report(
    y: &[usize],
    z: &[u8],
    model: Option<(&Classifier, ArrayView2<'_, f64>)>,
    split_seed: u64,
    repeats: usize,
    solver: &SolverConfig,
) -> Result<LeakageReport> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be >= 1".into()));
    }
    let mut ds_vals = Vec::with_capacity(repeats);
    for i in 0..repeats {
        ds_vals.push(dataset_leakage(y, z, split_seed + i as u64, solver)?);
    }
    let model_leak = match model {
        Some((clf, x)) => {
            let mut vals = Vec::with_capacity(repeats);
            for i in 0..repeats {
                vals.push(model_leakage(clf, x, z, split_seed + i as u64, solver)?);
            }
            Some(LeakageSummary::from_values(vals))
        }
        None => None,
    };
    Ok(LeakageReport {
        dataset_leakage: LeakageSummary::from_values(ds_vals),
        model_leakage: model_leak,
        attacker_config: solver.clone(),
        n_eval: y.len() - y.len() * 4 / 5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::rngs::StdRng;
    use rand::Rng;

    #[test]
    fn metrics_hand_values() {
        // Four subgroups with accuracies 0.9, 0.8, 0.7, 0.95 built from
        // 20-sample cells.
        let mut y_true = Vec::new();
        let mut y_pred = Vec::new();
        let mut z = Vec::new();
        for (cell, acc) in [(0usize, 0u8, 0.9), (0, 1, 0.8), (1, 0, 0.7), (1, 1, 0.95)]
            .iter()
            .map(|&(a, b, acc)| ((a, b), acc))
        {
            for i in 0..20 {
                y_true.push(cell.0);
                z.push(cell.1);
                let correct = (i as f64) < acc * 20.0;
                y_pred.push(if correct { cell.0 } else { 1 - cell.0 });
            }
        }
        let m = robust_metrics(&y_true, &y_pred, &z).unwrap();
        assert_abs_diff_eq!(m.robust_accuracy, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(m.robust_gap, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn metrics_all_correct() {
        let y = vec![0, 1, 0, 1];
        let z = vec![0u8, 0, 1, 1];
        let m = robust_metrics(&y, &y.clone(), &z).unwrap();
        assert_eq!(m.aggregate_accuracy, 1.0);
        assert_eq!(m.robust_accuracy, 1.0);
        assert_eq!(m.robust_gap, 0.0);
    }

    #[test]
    fn metrics_enumerated_gap() {
        // Subgroup sizes (2, 1, 1, 2); one error inside a size-2 subgroup
        // gives that cell accuracy 0.5 and a gap of 0.5.
        let y_true = vec![0, 0, 0, 1, 1, 1];
        let z = vec![0u8, 0, 1, 0, 1, 1];
        let mut y_pred = y_true.clone();
        y_pred[0] = 1;
        let m = robust_metrics(&y_true, &y_pred, &z).unwrap();
        assert_abs_diff_eq!(m.robust_accuracy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.robust_gap, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.aggregate_accuracy, 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_sandwich_invariant_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(1..60);
            let y_true: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let z: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let m = robust_metrics(&y_true, &y_pred, &z).unwrap();
            assert!(m.robust_accuracy <= m.aggregate_accuracy + 1e-12);
            assert!(m.aggregate_accuracy <= m.robust_accuracy + m.robust_gap + 1e-12);
            assert!(m.robust_gap >= 0.0);
        }
    }

    #[test]
    fn metrics_permutation_invariant() {
        let y_true = vec![0, 1, 0, 1, 1, 0];
        let y_pred = vec![0, 0, 0, 1, 1, 1];
        let z = vec![0u8, 1, 1, 0, 1, 0];
        let a = robust_metrics(&y_true, &y_pred, &z).unwrap();
        let perm = [3, 0, 5, 2, 4, 1];
        let b = robust_metrics(
            &perm.map(|i| y_true[i]),
            &perm.map(|i| y_pred[i]),
            &perm.map(|i| z[i]),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    fn co_occurrence(seed: u64, n: usize, rho: f64) -> (Vec<usize>, Vec<u8>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut y = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let yi = rng.random_range(0..2usize);
            let zi = if rng.random_range(0.0..1.0) < rho { yi as u8 } else { 1 - yi as u8 };
            y.push(yi);
            z.push(zi);
        }
        (y, z)
    }

    #[test]
    fn dataset_leakage_tracks_co_occurrence() {
        let solver = SolverConfig::default();
        // Independent labels: chance-level leakage.
        let (y, z) = co_occurrence(23, 2000, 0.5);
        let leak = dataset_leakage(&y, &z, 0, &solver).unwrap();
        assert!((leak - 0.5).abs() <= 0.05, "independent leakage {leak}");

        // Perfect co-occurrence: total leakage.
        let y: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let z: Vec<u8> = y.iter().map(|&v| v as u8).collect();
        assert_eq!(dataset_leakage(&y, &z, 0, &solver).unwrap(), 1.0);

        // 90/10 skew: leakage near the Bayes rate of the design.
        let (y, z) = co_occurrence(29, 2000, 0.9);
        let leak = dataset_leakage(&y, &z, 0, &solver).unwrap();
        assert!((leak - 0.9).abs() <= 0.03, "skewed leakage {leak}");
    }

    #[test]
    fn model_leakage_extremes() {
        let solver = SolverConfig::default();
        let mut rng = StdRng::seed_from_u64(31);
        let n = 2000;
        let z: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));

        // A constant classifier carries no signal.
        let clf = Classifier::zeros(2, 3);
        let leak = model_leakage(&clf, x.view(), &z, 1, &solver).unwrap();
        assert!((leak - 0.5).abs() <= 0.05, "constant-model leakage {leak}");

        // A classifier whose output encodes z exactly leaks everything.
        let mut x_enc = x.clone();
        for i in 0..n {
            x_enc[[i, 0]] = if z[i] == 1 { 10.0 } else { -10.0 };
        }
        let clf = Classifier {
            w: array![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]],
            b: Array1::zeros(2),
        };
        assert_eq!(model_leakage(&clf, x_enc.view(), &z, 1, &solver).unwrap(), 1.0);
    }

    #[test]
    fn leakage_symmetric_under_attribute_relabel() {
        let solver = SolverConfig::default();
        let (y, z) = co_occurrence(37, 2000, 0.8);
        let flipped: Vec<u8> = z.iter().map(|&v| 1 - v).collect();
        let a = dataset_leakage(&y, &z, 5, &solver).unwrap();
        let b = dataset_leakage(&y, &flipped, 5, &solver).unwrap();
        assert!((a - b).abs() <= 0.02, "{a} vs {b}");
    }

    #[test]
    fn degenerate_split_reshuffles_then_errors() {
        let solver = SolverConfig::default();
        // One lonely treated sample: most shuffles orphan it in the eval
        // side, but some seed within 10 attempts finds it (n = 10, 80/20).
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let mut z = vec![0u8; 10];
        z[3] = 1;
        let result = dataset_leakage(&y, &z, 0, &solver);
        assert!(result.is_ok());

        assert!(matches!(
            dataset_leakage(&[0, 1, 0, 1], &[0, 0, 0, 0], 0, &solver),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn report_shapes_and_repeat_seeds() {
        let solver = SolverConfig::default();
        let (y, z) = co_occurrence(41, 400, 0.7);
        let report = leakage_report(&y, &z, None, 3, 5, &solver).unwrap();
        assert_eq!(report.dataset_leakage.values.len(), 5);
        assert!(report.model_leakage.is_none());
        assert_eq!(report.n_eval, 400 - 320);
        // Repeat i must equal a direct call with seed 3 + i.
        let direct = dataset_leakage(&y, &z, 4, &solver).unwrap();
        assert_eq!(report.dataset_leakage.values[1], direct);
        let mean = report.dataset_leakage.values.iter().sum::<f64>() / 5.0;
        assert_abs_diff_eq!(report.dataset_leakage.mean, mean, epsilon = 1e-15);
    }
}
