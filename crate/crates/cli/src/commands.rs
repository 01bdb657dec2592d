//! Subcommand implementations. Each returns the process exit code on
//! success; errors bubble up and are mapped to exit codes in `main`.

use std::path::{Path, PathBuf};

use ndarray::Axis;
use realpatch::balance::{
    balance_report, default_grid, grid_search_stage1, imsitu_grid, matched_balance_report,
    BalanceReport,
};
use realpatch::eval::leakage_report;
use realpatch::matching::{
    pair_multiplicities, read_pairs_csv, write_pairs_csv, write_unmatched_csv, MatchedPair,
};
use realpatch::{
    robust_metrics, train_erm, train_patched, Classifier, Dataset, Error, MatchEngine, Result,
};
use serde::Serialize;

use crate::config::{load_grid, RunConfig};
use crate::{Objective, Preset};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// `pairs.csv` -> `pairs.unmatched.csv`.
fn unmatched_path(out: &Path) -> PathBuf {
    out.with_extension("unmatched.csv")
}

/// Comma-joined line assembly for the small report CSVs whose fields
/// never need quoting.
struct CsvOut {
    lines: Vec<String>,
}

impl CsvOut {
    fn new() -> Self {
        CsvOut { lines: Vec::new() }
    }

    fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let line = fields.into_iter().map(|f| f.as_ref().to_string()).collect::<Vec<_>>().join(",");
        self.lines.push(line);
    }

    fn finish(self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }
}

#[derive(Serialize)]
struct MatchReport<'a> {
    pre: &'a BalanceReport,
    post: Option<&'a BalanceReport>,
}

pub fn cmd_match(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    report: &Path,
    cli_seed: Option<u64>,
    quiet: bool,
) -> Result<u8> {
    let ds = Dataset::from_csv(data)?;
    let cfg = RunConfig::load(config)?;
    let mc = cfg.match_config(cfg.seed(cli_seed));
    let mut engine = MatchEngine::new(&ds, cfg.solver())?;
    let md = engine.run(&mc)?;
    if !quiet {
        for w in engine.warnings() {
            eprintln!("warning: {w}");
        }
    }
    write_pairs_csv(&md, out)?;
    write_unmatched_csv(&md, unmatched_path(out))?;

    let pre = balance_report(ds.x(), ds.z(), None)?;
    let post = if md.is_empty() { None } else { Some(matched_balance_report(&ds, &md.pairs)?) };
    write_json(report, &MatchReport { pre: &pre, post: post.as_ref() })?;

    if md.is_empty() {
        eprintln!("error: no pairs survived the calipers");
        return Ok(3);
    }
    if !quiet {
        eprintln!(
            "matched {} pairs ({} unmatched); post-match balance:\n{}",
            md.pairs.len(),
            md.unmatched.len(),
            post.expect("non-empty matched set")
        );
    }
    Ok(0)
}

pub fn cmd_gridsearch(
    data: &Path,
    grid_path: Option<&Path>,
    preset: Option<Preset>,
    config: Option<&Path>,
    out: &Path,
    cli_seed: Option<u64>,
    quiet: bool,
) -> Result<u8> {
    let ds = Dataset::from_csv(data)?;
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed(cli_seed);
    let grid = match (grid_path, preset) {
        (Some(path), None) => load_grid(path, seed)?,
        (None, Some(Preset::Default)) => default_grid(seed),
        (None, Some(Preset::Imsitu)) => imsitu_grid(seed),
        (None, None) => return Err(Error::Invalid("provide either --grid or --preset".into())),
        (Some(_), Some(_)) => {
            return Err(Error::Invalid("--grid and --preset are mutually exclusive".into()));
        }
    };
    let entries = grid_search_stage1(&ds, &grid, &cfg.solver())?;

    let mut w = CsvOut::new();
    w.row([
        "rank",
        "reweighting",
        "temperature",
        "fixed_caliper_c",
        "std_caliper_alpha",
        "metric",
        "n_pairs",
        "n_treatment",
        "n_control",
        "smd_le_0.1",
        "smd_mid",
        "smd_ge_0.2",
        "vr_le_4/5",
        "vr_mid",
        "vr_ge_5/4",
        "note",
    ]);
    for (rank, e) in entries.iter().enumerate() {
        let alpha = if e.config.std_caliper_alpha.is_finite() {
            e.config.std_caliper_alpha.to_string()
        } else {
            "inf".to_string()
        };
        let (nt, nc, smd, vr) = match &e.report {
            Some(r) => (
                r.n_treatment.to_string(),
                r.n_control.to_string(),
                [r.smd_buckets.le, r.smd_buckets.mid, r.smd_buckets.ge],
                [r.vr_buckets.le, r.vr_buckets.mid, r.vr_buckets.ge],
            ),
            None => (String::new(), String::new(), [0; 3], [0; 3]),
        };
        w.row([
            (rank + 1).to_string(),
            e.config.reweighting.to_string(),
            e.config.temperature.to_string(),
            e.config.fixed_caliper_c.to_string(),
            alpha,
            e.config.metric.to_string(),
            e.n_pairs.to_string(),
            nt,
            nc,
            smd[0].to_string(),
            smd[1].to_string(),
            smd[2].to_string(),
            vr[0].to_string(),
            vr[1].to_string(),
            vr[2].to_string(),
            e.note.clone().unwrap_or_default(),
        ]);
    }
    w.finish(out)?;
    if !quiet {
        if let Some(best) = entries.first() {
            eprintln!(
                "best config: reweighting={} t={} c={} alpha={} ({} pairs)",
                best.config.reweighting,
                best.config.temperature,
                best.config.fixed_caliper_c,
                best.config.std_caliper_alpha,
                best.n_pairs
            );
        }
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    data: &Path,
    pairs: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    log: &Path,
    val: Option<&Path>,
    objective: Objective,
    cli_seed: Option<u64>,
    quiet: bool,
) -> Result<u8> {
    let ds = Dataset::from_csv(data)?;
    let cfg = RunConfig::load(config)?;
    let tc = cfg.train_config(cfg.seed(cli_seed));
    let val_ds = val.map(Dataset::from_csv).transpose()?;
    let pair_list: Vec<MatchedPair> = match pairs {
        Some(p) => read_pairs_csv(p)?,
        None => Vec::new(),
    };
    let (clf, logs) = match objective {
        Objective::Patched => train_patched(&ds, &pair_list, &tc, val_ds.as_ref())?,
        Objective::Erm => train_erm(&ds, &tc, val_ds.as_ref())?,
    };
    clf.save_json(out)?;

    let mut w = CsvOut::new();
    w.row(["epoch", "loss_sgdro", "loss_sc", "agg_acc", "robust_acc", "robust_gap"]);
    for l in &logs {
        let opt = |v: Option<f64>| v.map(g17).unwrap_or_default();
        w.row([
            l.epoch.to_string(),
            g17(l.loss_sgdro),
            g17(l.loss_sc),
            opt(l.agg_acc),
            opt(l.robust_acc),
            opt(l.robust_gap),
        ]);
    }
    w.finish(log)?;
    if !quiet {
        if let Some(last) = logs.last() {
            eprintln!(
                "trained {} epochs; final loss {:.6}{}",
                logs.len(),
                last.loss_sgdro + cfg.training.lambda_sc * last.loss_sc,
                last.robust_acc
                    .map(|r| format!(", validation robust accuracy {r:.4}"))
                    .unwrap_or_default()
            );
        }
    }
    Ok(0)
}

pub fn cmd_eval(data: &Path, model: &Path, out: &Path, quiet: bool) -> Result<u8> {
    let ds = Dataset::from_csv(data)?;
    let clf = Classifier::load_json(model)?;
    let pred = clf.predict(ds.x())?;
    let metrics = robust_metrics(ds.y(), &pred, ds.z())?;
    write_json(out, &metrics)?;
    if !quiet {
        eprintln!(
            "aggregate {:.4}, robust {:.4}, gap {:.4}",
            metrics.aggregate_accuracy, metrics.robust_accuracy, metrics.robust_gap
        );
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_leakage(
    data: &Path,
    model: Option<&Path>,
    pairs: Option<&Path>,
    repeats: usize,
    config: Option<&Path>,
    out: &Path,
    cli_seed: Option<u64>,
    quiet: bool,
) -> Result<u8> {
    let ds = Dataset::from_csv(data)?;
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed(cli_seed);
    let clf = model.map(Classifier::load_json).transpose()?;

    // With pairs the probe runs on the matched-resampled dataset: every
    // sample enters once per pair it belongs to.
    let rows: Vec<usize> = match pairs {
        Some(p) => {
            let mult = pair_multiplicities(&ds, &read_pairs_csv(p)?)?;
            (0..ds.len()).flat_map(|i| std::iter::repeat(i).take(mult[i])).collect()
        }
        None => (0..ds.len()).collect(),
    };
    if rows.is_empty() {
        eprintln!("error: the matched set is empty");
        return Ok(3);
    }
    let y: Vec<usize> = rows.iter().map(|&i| ds.y()[i]).collect();
    let z: Vec<u8> = rows.iter().map(|&i| ds.z()[i]).collect();
    let x = ds.x().select(Axis(0), &rows);

    let report = leakage_report(
        &y,
        &z,
        clf.as_ref().map(|c| (c, x.view())),
        seed,
        repeats,
        &cfg.solver(),
    )?;
    write_json(out, &report)?;
    if !quiet {
        eprint!(
            "dataset leakage {:.4} ({:.4})",
            report.dataset_leakage.mean, report.dataset_leakage.std
        );
        match &report.model_leakage {
            Some(m) => eprintln!(", model leakage {:.4} ({:.4})", m.mean, m.std),
            None => eprintln!(),
        }
    }
    Ok(0)
}

pub fn cmd_balance(data: &Path, pairs: Option<&Path>, out: &Path, quiet: bool) -> Result<u8> {
    let ds = Dataset::from_csv(data)?;
    let report = match pairs {
        Some(p) => matched_balance_report(&ds, &read_pairs_csv(p)?)?,
        None => balance_report(ds.x(), ds.z(), None)?,
    };
    write_json(out, &report)?;
    if !quiet {
        eprintln!("{report}");
    }
    Ok(0)
}
