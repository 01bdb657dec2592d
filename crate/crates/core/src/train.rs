//! Stage-2 training: a softmax classifier on the covariates minimising a
//! subgroup-robust objective plus a matched-pair self-consistency
//! regulariser, `L = L_sgdro + lambda * L_sc`, and a plain ERM reference
//! trainer sharing the same optimizer.
//!
//! The robust objective keeps a multiplicative weight `q_{y,z}` per
//! subgroup, normalised within each target group. Each step exponentiates
//! the weights of the subgroups present in the batch by their adjusted
//! losses `l + c_adj / sqrt(n_{y,z})` and re-normalises, then averages the
//! weighted subgroup losses over the target groups present. The
//! self-consistency term pushes both predictions of a matched pair toward
//! their average output distribution.
//!
//! Training is single threaded and fully determined by the seed: data
//! batches and pair batches draw from independent seeded streams, so a
//! run with `lambda = 0` follows the exact parameter trajectory of a run
//! with the regulariser ablated.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubgroupIndex};
use crate::error::{Error, Result};
use crate::eval::robust_metrics;
use crate::matching::MatchedPair;
use crate::util::SCORE_EPS;

/// Linear softmax classifier over the covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// K x d weight matrix.
    pub w: Array2<f64>,
    /// Length-K bias vector.
    pub b: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(rename = "K")]
    k: usize,
    d: usize,
}

impl Classifier {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Classifier { w: Array2::zeros((n_classes, dim)), b: Array1::zeros(n_classes) }
    }

    pub fn n_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// Class probabilities for one sample: `softmax(Wx + b)`, stabilised
    /// by max-logit subtraction.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut logits = self.w.dot(&x) + &self.b;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.mapv_inplace(|v| (v - max).exp());
        let sum = logits.sum();
        logits / sum
    }

    /// Probability matrix for every row of `x`.
    pub fn probabilities(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: x.ncols() });
        }
        let mut out = Array2::zeros((x.nrows(), self.n_classes()));
        for (i, row) in x.outer_iter().enumerate() {
            out.row_mut(i).assign(&self.forward_unchecked(row));
        }
        Ok(out)
    }

    /// Predicted class per row (argmax; ties go to the lower index).
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: x.ncols() });
        }
        Ok(x.outer_iter()
            .map(|row| {
                let p = self.forward_unchecked(row);
                let mut best = 0;
                for (k, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ClassifierFile {
            w: self.w.outer_iter().map(|r| r.to_vec()).collect(),
            b: self.b.to_vec(),
            k: self.n_classes(),
            d: self.dim(),
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::format(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ClassifierFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if file.w.len() != file.k || file.b.len() != file.k {
            return Err(Error::format(path, "W and b must have K rows"));
        }
        if file.w.iter().any(|r| r.len() != file.d) {
            return Err(Error::format(path, "every W row must have d entries"));
        }
        let flat: Vec<f64> = file.w.concat();
        if flat.iter().chain(file.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::format(path, "parameters must be finite"));
        }
        Ok(Classifier {
            w: Array2::from_shape_vec((file.k, file.d), flat).expect("validated shape"),
            b: Array1::from(file.b),
        })
    }
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Self-consistency strength; 0 disables the regulariser.
    pub lambda_sc: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Step size of the multiplicative subgroup-weight update.
    pub eta_q: f64,
    /// Adjustment coefficient: small subgroups get `c_adj / sqrt(n)`
    /// added to their loss before reweighting.
    pub c_adj: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_sc: 1.0,
            learning_rate: 0.1,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 100,
            eta_q: 0.01,
            c_adj: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sc >= 0.0 && self.lambda_sc.is_finite()) {
            return Err(Error::Invalid(format!("lambda_sc must be finite and >= 0, got {}", self.lambda_sc)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.eta_q > 0.0 && self.eta_q.is_finite()) {
            return Err(Error::Invalid(format!("eta_q must be positive, got {}", self.eta_q)));
        }
        if !(self.c_adj >= 0.0 && self.c_adj.is_finite()) {
            return Err(Error::Invalid(format!("c_adj must be finite and >= 0, got {}", self.c_adj)));
        }
        Ok(())
    }
}

/// Multiplicative subgroup weights for the robust objective, normalised
/// within each target group over the subgroups present in the data.
#[derive(Debug, Clone)]
pub struct SgdroState {
    q: BTreeMap<(usize, u8), f64>,
    sizes: BTreeMap<(usize, u8), usize>,
    pub eta_q: f64,
    pub c_adj: f64,
}

impl SgdroState {
    /// Uniform weights over the non-empty subgroups of each target group.
    pub fn new(index: &SubgroupIndex, eta_q: f64, c_adj: f64) -> Self {
        let mut per_y: BTreeMap<usize, usize> = BTreeMap::new();
        for ((y, _), rows) in index.nonempty() {
            *per_y.entry(y).or_insert(0) += usize::from(!rows.is_empty());
        }
        let mut q = BTreeMap::new();
        let mut sizes = BTreeMap::new();
        for ((y, z), rows) in index.nonempty() {
            q.insert((y, z), 1.0 / per_y[&y] as f64);
            sizes.insert((y, z), rows.len());
        }
        SgdroState { q, sizes, eta_q, c_adj }
    }

    pub fn weight(&self, y: usize, z: u8) -> Option<f64> {
        self.q.get(&(y, z)).copied()
    }

    /// Loss plus the size adjustment `c_adj / sqrt(n_{y,z})`.
    fn adjusted(&self, key: (usize, u8), loss: f64) -> f64 {
        let n = self.sizes.get(&key).copied().unwrap_or(1).max(1);
        loss + self.c_adj / (n as f64).sqrt()
    }

    /// Exponentiate the weights of the subgroups present in `losses` by
    /// their adjusted losses, re-normalise the affected target groups,
    /// and return the robust loss: the mean over present target groups of
    /// the weighted adjusted subgroup losses. Subgroups absent from the
    /// batch keep their weight untouched.
    pub fn step(&mut self, losses: &BTreeMap<(usize, u8), f64>) -> f64 {
        debug_assert!(!losses.is_empty(), "a batch always contains a subgroup");
        debug_assert!(losses.keys().all(|k| self.q.contains_key(k)));
        for (&key, &loss) in losses {
            let adj = self.adjusted(key, loss);
            if let Some(w) = self.q.get_mut(&key) {
                *w *= (self.eta_q * adj).exp();
            }
        }
        let touched: std::collections::BTreeSet<usize> = losses.keys().map(|&(y, _)| y).collect();
        for &y in &touched {
            let total: f64 = self.q.iter().filter(|((gy, _), _)| *gy == y).map(|(_, w)| w).sum();
            if total > 0.0 {
                for ((gy, _), w) in self.q.iter_mut() {
                    if *gy == y {
                        *w /= total;
                    }
                }
            }
        }
        self.weighted_loss(losses)
    }

    /// The robust loss with the current (frozen) weights.
    pub fn weighted_loss(&self, losses: &BTreeMap<(usize, u8), f64>) -> f64 {
        let present_y: std::collections::BTreeSet<usize> = losses.keys().map(|&(y, _)| y).collect();
        if present_y.is_empty() {
            return 0.0;
        }
        let total: f64 = losses
            .iter()
            .map(|(&key, &loss)| self.q.get(&key).copied().unwrap_or(0.0) * self.adjusted(key, loss))
            .sum();
        total / present_y.len() as f64
    }

    /// Check positivity and per-target-group normalisation (within `tol`).
    pub fn is_normalized(&self, tol: f64) -> bool {
        if self.q.values().any(|&w| !(w > 0.0)) {
            return false;
        }
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (&(y, _), &w) in &self.q {
            *sums.entry(y).or_insert(0.0) += w;
        }
        sums.values().all(|&s| (s - 1.0).abs() <= tol)
    }
}

fn ln_clamped(p: f64) -> f64 {
    p.max(SCORE_EPS).ln()
}

/// Self-consistency loss of one matched pair: with `m` the average of the
/// two distributions, `0.5 * [KL(p_t || m) + KL(p_c || m)]`. Symmetric,
/// zero iff the inputs agree, bounded by ln 2.
pub fn self_consistency_loss(p_t: &[f64], p_c: &[f64]) -> Result<f64> {
    if p_t.len() != p_c.len() {
        return Err(Error::DimMismatch { expected: p_t.len(), got: p_c.len() });
    }
    let mut acc = 0.0;
    for (&a, &b) in p_t.iter().zip(p_c.iter()) {
        let m = 0.5 * (a + b);
        acc += 0.5 * (a * (ln_clamped(a) - ln_clamped(m)) + b * (ln_clamped(b) - ln_clamped(m)));
    }
    Ok(acc)
}

/// Mean cross-entropy per subgroup over the batch rows.
fn batch_subgroup_losses(
    clf: &Classifier,
    ds: &Dataset,
    batch: &[usize],
) -> BTreeMap<(usize, u8), f64> {
    let mut sums: BTreeMap<(usize, u8), (f64, usize)> = BTreeMap::new();
    for &row in batch {
        let p = clf.forward_unchecked(ds.x().row(row));
        let ce = -ln_clamped(p[ds.y()[row]]);
        let e = sums.entry((ds.y()[row], ds.z()[row])).or_insert((0.0, 0));
        e.0 += ce;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Evaluate the full Stage-2 objective on fixed batches with frozen
/// subgroup weights: robust term over `data_batch` plus `lambda_sc` times
/// the mean pair self-consistency over `pair_batch`. This is the exact
/// function the optimiser descends in one step.
pub fn stage2_loss(
    clf: &Classifier,
    ds: &Dataset,
    data_batch: &[usize],
    pair_batch: &[(usize, usize)],
    state: &SgdroState,
    lambda_sc: f64,
) -> f64 {
    let losses = batch_subgroup_losses(clf, ds, data_batch);
    let sgdro = state.weighted_loss(&losses);
    let sc = if pair_batch.is_empty() {
        0.0
    } else {
        pair_batch
            .iter()
            .map(|&(a, b)| {
                let p_t = clf.forward_unchecked(ds.x().row(a));
                let p_c = clf.forward_unchecked(ds.x().row(b));
                self_consistency_loss(p_t.as_slice().unwrap(), p_c.as_slice().unwrap()).expect("equal lengths")
            })
            .sum::<f64>()
            / pair_batch.len() as f64
    };
    sgdro + lambda_sc * sc
}

/// Analytic gradient of [`stage2_loss`] in the classifier parameters,
/// returning `(sgdro_loss, sc_loss, grad_w, grad_b)`.
pub fn stage2_loss_grad(
    clf: &Classifier,
    ds: &Dataset,
    data_batch: &[usize],
    pair_batch: &[(usize, usize)],
    state: &SgdroState,
    lambda_sc: f64,
) -> (f64, f64, Array2<f64>, Array1<f64>) {
    let k = clf.n_classes();
    let d = clf.dim();
    let mut gw = Array2::zeros((k, d));
    let mut gb = Array1::zeros(k);
    let x = ds.x();

    // Robust term: group the batch, weight each subgroup's mean CE
    // gradient by q / (|present target groups| * batch count).
    let mut groups: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for &row in data_batch {
        groups.entry((ds.y()[row], ds.z()[row])).or_default().push(row);
    }
    let present_y: std::collections::BTreeSet<usize> = groups.keys().map(|&(y, _)| y).collect();
    let y_count = present_y.len().max(1) as f64;
    let mut sgdro = 0.0;
    for (&key, rows) in &groups {
        let q = state.weight(key.0, key.1).unwrap_or(0.0);
        let coeff = q / (y_count * rows.len() as f64);
        let mut mean_ce = 0.0;
        for &row in rows {
            let p = clf.forward_unchecked(x.row(row));
            mean_ce += -ln_clamped(p[ds.y()[row]]);
            let mut du = p;
            du[ds.y()[row]] -= 1.0;
            for (kk, &duv) in du.iter().enumerate() {
                let mut grow = gw.row_mut(kk);
                grow.scaled_add(coeff * duv, &x.row(row));
            }
            gb.scaled_add(coeff, &du);
        }
        mean_ce /= rows.len() as f64;
        sgdro += q * state.adjusted(key, mean_ce) / y_count;
    }

    // Self-consistency term: for each pair, the loss gradient in each
    // member's probabilities is 0.5 * ln(p / m); backpropagate through
    // the softmax.
    let mut sc = 0.0;
    if !pair_batch.is_empty() && lambda_sc != 0.0 {
        let pair_coeff = lambda_sc / pair_batch.len() as f64;
        for &(a, b) in pair_batch {
            let p_t = clf.forward_unchecked(x.row(a));
            let p_c = clf.forward_unchecked(x.row(b));
            sc += self_consistency_loss(p_t.as_slice().unwrap(), p_c.as_slice().unwrap())
                .expect("equal lengths");
            for (p, row) in [(&p_t, a), (&p_c, b)] {
                let g: Array1<f64> = p
                    .iter()
                    .zip(p_t.iter().zip(p_c.iter()))
                    .map(|(&pi, (&t, &c))| {
                        let m = 0.5 * (t + c);
                        0.5 * (ln_clamped(pi) - ln_clamped(m))
                    })
                    .collect();
                let inner = g.dot(p);
                let du: Array1<f64> = p.iter().zip(g.iter()).map(|(&pi, &gi)| pi * (gi - inner)).collect();
                for (kk, &duv) in du.iter().enumerate() {
                    let mut grow = gw.row_mut(kk);
                    grow.scaled_add(pair_coeff * duv, &x.row(row));
                }
                gb.scaled_add(pair_coeff, &du);
            }
        }
        sc /= pair_batch.len() as f64;
    }

    (sgdro, sc, gw, gb)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_sgdro: f64,
    pub loss_sc: f64,
    pub agg_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub robust_gap: Option<f64>,
}

fn resolve_pairs(ds: &Dataset, pairs: &[MatchedPair]) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|p| {
            let a = ds
                .row_of(&p.treatment_id)
                .ok_or_else(|| Error::Invalid(format!("pair references unknown id `{}`", p.treatment_id)))?;
            let b = ds
                .row_of(&p.control_id)
                .ok_or_else(|| Error::Invalid(format!("pair references unknown id `{}`", p.control_id)))?;
            Ok((a, b))
        })
        .collect()
}

fn epoch_metrics(clf: &Classifier, val: Option<&Dataset>, log: &mut EpochLog) -> Result<()> {
    if let Some(v) = val {
        let pred = clf.predict(v.x())?;
        let m = robust_metrics(v.y(), &pred, v.z())?;
        log.agg_acc = Some(m.aggregate_accuracy);
        log.robust_acc = Some(m.robust_accuracy);
        log.robust_gap = Some(m.robust_gap);
    }
    Ok(())
}

/// Train the patched classifier: per step, one batch from the dataset for
/// the robust term and an equal-size batch of matched pairs (sampled with
/// replacement) for the self-consistency term.
pub fn train_patched(
    ds: &Dataset,
    pairs: &[MatchedPair],
    cfg: &TrainConfig,
    val: Option<&Dataset>,
) -> Result<(Classifier, Vec<EpochLog>)> {
    cfg.validate()?;
    if cfg.lambda_sc > 0.0 && pairs.is_empty() {
        return Err(Error::Invalid("lambda_sc > 0 requires a non-empty matched set".into()));
    }
    let pair_rows = resolve_pairs(ds, pairs)?;
    let index = SubgroupIndex::build(ds);
    let mut state = SgdroState::new(&index, cfg.eta_q, cfg.c_adj);
    let mut clf = Classifier::zeros(ds.n_classes(), ds.dim());

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pair_rng.set_stream(2);

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        let mut sum_sgdro = 0.0;
        let mut sum_sc = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let losses = batch_subgroup_losses(&clf, ds, chunk);
            state.step(&losses);
            let pair_batch: Vec<(usize, usize)> = if cfg.lambda_sc > 0.0 {
                (0..chunk.len())
                    .map(|_| pair_rows[pair_rng.random_range(0..pair_rows.len())])
                    .collect()
            } else {
                Vec::new()
            };
            let (l_sgdro, l_sc, gw, gb) =
                stage2_loss_grad(&clf, ds, chunk, &pair_batch, &state, cfg.lambda_sc);
            apply_sgd_step(&mut clf, &gw, &gb, cfg);
            sum_sgdro += l_sgdro;
            sum_sc += l_sc;
            steps += 1;
        }
        let mut log = EpochLog {
            epoch,
            loss_sgdro: sum_sgdro / steps as f64,
            loss_sc: sum_sc / steps as f64,
            agg_acc: None,
            robust_acc: None,
            robust_gap: None,
        };
        epoch_metrics(&clf, val, &mut log)?;
        logs.push(log);
    }
    Ok((clf, logs))
}

/// Plain average cross-entropy with weight decay, same optimizer and
/// determinism contract as the patched trainer.
pub fn train_erm(
    ds: &Dataset,
    cfg: &TrainConfig,
    val: Option<&Dataset>,
) -> Result<(Classifier, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut clf = Classifier::zeros(ds.n_classes(), ds.dim());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let x = ds.x();

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        let mut sum_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let k = clf.n_classes();
            let mut gw = Array2::zeros((k, clf.dim()));
            let mut gb = Array1::zeros(k);
            let coeff = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &row in chunk {
                let p = clf.forward_unchecked(x.row(row));
                loss += -ln_clamped(p[ds.y()[row]]);
                let mut du = p;
                du[ds.y()[row]] -= 1.0;
                for (kk, &duv) in du.iter().enumerate() {
                    let mut grow = gw.row_mut(kk);
                    grow.scaled_add(coeff * duv, &x.row(row));
                }
                gb.scaled_add(coeff, &du);
            }
            apply_sgd_step(&mut clf, &gw, &gb, cfg);
            sum_loss += loss * coeff;
            steps += 1;
        }
        let mut log = EpochLog {
            epoch,
            loss_sgdro: sum_loss / steps as f64,
            loss_sc: 0.0,
            agg_acc: None,
            robust_acc: None,
            robust_gap: None,
        };
        epoch_metrics(&clf, val, &mut log)?;
        logs.push(log);
    }
    Ok((clf, logs))
}

fn apply_sgd_step(clf: &mut Classifier, gw: &Array2<f64>, gb: &Array1<f64>, cfg: &TrainConfig) {
    ndarray::Zip::from(&mut clf.w).and(gw).for_each(|w, &g| {
        *w -= cfg.learning_rate * (g + cfg.weight_decay * *w);
    });
    ndarray::Zip::from(&mut clf.b).and(gb).for_each(|b, &g| {
        *b -= cfg.learning_rate * (g + cfg.weight_decay * *b);
    });
}
