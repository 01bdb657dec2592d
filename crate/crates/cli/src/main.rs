//! `realpatch` command line: match a dataset across a binary spurious
//! attribute, sweep Stage-1 configurations by covariate balance, train
//! patched or ERM classifiers, and probe robustness and leakage.
//!
//! Exit codes: 0 success, 2 validation error, 3 empty matched set,
//! 1 internal failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use realpatch::Error;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "realpatch", version, about = "Statistical matching and subgroup-robust training")]
struct Cli {
    /// Base seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for distance matrices and grid search.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Suppress informational stderr output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full Stage-1 sweep: both reweightings, t in [0.6, 1.3] step 0.05,
    /// c in {0.1, 0.05, 0}, alpha in {0.2, 0.4, 0.6, none}.
    Default,
    /// Narrow sweep: spurious reweighting, t in [0.6, 1.0] step 0.1,
    /// c in {0, 0.1}, alpha = 0.2.
    Imsitu,
}

#[derive(Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Objective {
    /// Subgroup-robust objective plus matched-pair self-consistency.
    #[default]
    Patched,
    /// Plain average cross-entropy.
    Erm,
}

#[derive(Subcommand)]
enum Command {
    /// Match the dataset bidirectionally and report covariate balance.
    Match {
        /// Input dataset CSV (`id,y,z,x0,...`).
        #[arg(long)]
        data: PathBuf,
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output pairs CSV; unmatched ids go to `<out>.unmatched.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Output JSON with pre- and post-match balance.
        #[arg(long)]
        report: PathBuf,
    },
    /// Rank Stage-1 configurations by post-match covariate balance.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        /// Grid JSON: an array of matching configurations.
        #[arg(long, conflicts_with = "preset")]
        grid: Option<PathBuf>,
        /// Bundled grid preset.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Run configuration JSON (propensity solver settings).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output ranked CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier and write the model plus a per-epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Matched pairs CSV; required when `lambda_sc > 0`.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model JSON.
        #[arg(long)]
        out: PathBuf,
        /// Output training-log CSV.
        #[arg(long)]
        log: PathBuf,
        /// Validation dataset for per-epoch subgroup accuracies.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        objective: Objective,
    },
    /// Subgroup-robust metrics of a trained model on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output metrics JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute leakage of the true labels and, optionally, of a model.
    Leakage {
        #[arg(long)]
        data: PathBuf,
        /// Model JSON for model leakage; omit for dataset leakage only.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Matched pairs CSV: probe the resampled dataset instead.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Attacker repeats; repeat i uses seed + i.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output leakage JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Covariate balance of a dataset, or of its matched resampling.
    Balance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Output balance JSON.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    // Everything the library reports is a problem with inputs or
    // configuration; 1 is reserved for panics.
    match err {
        Error::Io { .. }
        | Error::Header { .. }
        | Error::Row { .. }
        | Error::Format { .. }
        | Error::Invalid(_)
        | Error::DimMismatch { .. }
        | Error::DegenerateSplit { .. } => 2,
    }
}

fn run(cli: Cli) -> realpatch::Result<u8> {
    let seed = cli.seed;
    let quiet = cli.quiet;
    match &cli.command {
        Command::Match { data, config, out, report } => {
            commands::cmd_match(data, config.as_deref(), out, report, seed, quiet)
        }
        Command::Gridsearch { data, grid, preset, config, out } => commands::cmd_gridsearch(
            data,
            grid.as_deref(),
            *preset,
            config.as_deref(),
            out,
            seed,
            quiet,
        ),
        Command::Train { data, pairs, config, out, log, val, objective } => commands::cmd_train(
            data,
            pairs.as_deref(),
            config.as_deref(),
            out,
            log,
            val.as_deref(),
            *objective,
            seed,
            quiet,
        ),
        Command::Eval { data, model, out } => commands::cmd_eval(data, model, out, quiet),
        Command::Leakage { data, model, pairs, repeats, config, out } => commands::cmd_leakage(
            data,
            model.as_deref(),
            pairs.as_deref(),
            *repeats,
            config.as_deref(),
            out,
            seed,
            quiet,
        ),
        Command::Balance { data, pairs, out } => {
            commands::cmd_balance(data, pairs.as_deref(), out, quiet)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: failed to initialise the thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
