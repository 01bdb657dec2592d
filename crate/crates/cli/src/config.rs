//! JSON run configuration. Every section is optional and falls back to
//! the documented defaults; unknown keys are rejected. A `null` (or
//! absent) `std_caliper_alpha` in grid files means "no std caliper".

use std::path::Path;

use realpatch::matching::DistanceMetric;
use realpatch::propensity::Reweighting;
use realpatch::{Error, MatchConfig, Result, SolverConfig, TrainConfig};
use serde::{Deserialize, Serialize};

fn de_alpha<'de, D>(deserializer: D) -> std::result::Result<f64, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let v = Option::<f64>::deserialize(deserializer)?;
    Ok(v.unwrap_or(f64::INFINITY))
}

fn ser_alpha<S>(v: &f64, serializer: S) -> std::result::Result<S::Ok, S::Error>
where
    S: serde::Serializer,
{
    if v.is_finite() {
        serializer.serialize_some(v)
    } else {
        serializer.serialize_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropensitySection {
    pub reweighting: Reweighting,
    pub lambda_reg: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PropensitySection {
    fn default() -> Self {
        let solver = SolverConfig::default();
        PropensitySection {
            reweighting: Reweighting::None,
            lambda_reg: solver.lambda_reg,
            tolerance: solver.tolerance,
            max_iter: solver.max_iter,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingSection {
    pub temperature: f64,
    pub fixed_caliper_c: f64,
    #[serde(deserialize_with = "de_alpha", serialize_with = "ser_alpha")]
    pub std_caliper_alpha: f64,
    pub metric: DistanceMetric,
}

impl Default for MatchingSection {
    fn default() -> Self {
        let mc = MatchConfig::default();
        MatchingSection {
            temperature: mc.temperature,
            fixed_caliper_c: mc.fixed_caliper_c,
            std_caliper_alpha: mc.std_caliper_alpha,
            metric: mc.metric,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lambda_sc: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eta_q: f64,
    pub c_adj: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let tc = TrainConfig::default();
        TrainingSection {
            lambda_sc: tc.lambda_sc,
            learning_rate: tc.learning_rate,
            weight_decay: tc.weight_decay,
            batch_size: tc.batch_size,
            epochs: tc.epochs,
            eta_q: tc.eta_q,
            c_adj: tc.c_adj,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub propensity: PropensitySection,
    pub matching: MatchingSection,
    pub training: TrainingSection,
    pub seed: u64,
}

impl RunConfig {
    /// Load from JSON, or return the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })
            }
        }
    }

    /// Effective seed: the command-line flag wins over the file.
    pub fn seed(&self, cli_seed: Option<u64>) -> u64 {
        cli_seed.unwrap_or(self.seed)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            lambda_reg: self.propensity.lambda_reg,
            tolerance: self.propensity.tolerance,
            max_iter: self.propensity.max_iter,
        }
    }

    pub fn match_config(&self, seed: u64) -> MatchConfig {
        MatchConfig {
            reweighting: self.propensity.reweighting,
            temperature: self.matching.temperature,
            fixed_caliper_c: self.matching.fixed_caliper_c,
            std_caliper_alpha: self.matching.std_caliper_alpha,
            metric: self.matching.metric,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda_sc: self.training.lambda_sc,
            learning_rate: self.training.learning_rate,
            weight_decay: self.training.weight_decay,
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            eta_q: self.training.eta_q,
            c_adj: self.training.c_adj,
            seed,
        }
    }
}

/// One entry of a grid file: a complete Stage-1 configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridEntry {
    pub reweighting: Reweighting,
    pub temperature: f64,
    pub fixed_caliper_c: f64,
    #[serde(deserialize_with = "de_alpha", serialize_with = "ser_alpha")]
    pub std_caliper_alpha: f64,
    pub metric: DistanceMetric,
}

impl Default for GridEntry {
    fn default() -> Self {
        let mc = MatchConfig::default();
        GridEntry {
            reweighting: mc.reweighting,
            temperature: mc.temperature,
            fixed_caliper_c: mc.fixed_caliper_c,
            std_caliper_alpha: mc.std_caliper_alpha,
            metric: mc.metric,
        }
    }
}

impl GridEntry {
    pub fn to_match_config(&self, seed: u64) -> MatchConfig {
        MatchConfig {
            reweighting: self.reweighting,
            temperature: self.temperature,
            fixed_caliper_c: self.fixed_caliper_c,
            std_caliper_alpha: self.std_caliper_alpha,
            metric: self.metric,
            seed,
        }
    }
}

/// Parse a grid file: a JSON array of [`GridEntry`] objects.
pub fn load_grid(path: &Path, seed: u64) -> Result<Vec<MatchConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let entries: Vec<GridEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(entries.iter().map(|e| e.to_match_config(seed)).collect())
}
