//! Two-stage pipeline for mitigating spurious correlations in tabular
//! feature datasets.
//!
//! Stage 1 ([`matching`]) pairs samples across the two groups defined by a
//! binary spurious attribute: propensity scores are estimated with a
//! weighted logistic regression ([`propensity`]), post-processed with
//! temperature scaling, filtered through fixed and std-based calipers, and
//! matched by nearest neighbour in both directions. Matching quality is
//! diagnosed with per-covariate standardized mean differences and variance
//! ratios ([`balance`]), which also drive a grid search over Stage-1
//! configurations.
//!
//! Stage 2 ([`train`]) fits a softmax classifier that combines a
//! subgroup-robust objective (per-target-group distributionally robust
//! weighting of the spurious groups) with a self-consistency regulariser
//! pulling the predictions of each matched pair together. Models are
//! scored by subgroup-robust metrics and attribute-leakage probes
//! ([`eval`]).
//!
//! All randomness is seeded; identical inputs and configuration produce
//! identical outputs.

pub mod balance;
pub mod data;
pub mod error;
pub mod eval;
pub mod matching;
pub mod propensity;
pub mod train;
mod util;

pub use balance::{balance_report, grid_search_stage1, BalanceReport, GridSearchEntry};
pub use data::{Dataset, SubgroupIndex};
pub use error::{Error, Result};
pub use eval::{robust_metrics, LeakageReport, RobustMetrics};
pub use matching::{
    match_bidirectional, Direction, DistanceMetric, MatchConfig, MatchEngine, MatchedDataset,
    MatchedPair,
};
pub use propensity::{PropensityModel, Reweighting, SolverConfig};
pub use train::{train_erm, train_patched, Classifier, TrainConfig};
