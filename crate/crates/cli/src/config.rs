//! Run configuration file and flag parsing helpers.

use std::path::Path;

use mixcast::data::SyntheticSpec;
use mixcast::metrics::{CRPS_POINTS, INTERVAL_POINTS};
use mixcast::nn::Variant;
use mixcast::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a config file may set. Every section and field is optional;
/// command-line flags override file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    None,
    /// Nodes linked to their predecessor and successor in id order.
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub k: usize,
    pub history: usize,
    pub horizon: usize,
    pub graph: GraphKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Gmm,
            k: 5,
            history: 10,
            horizon: 10,
            graph: GraphKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub coverage_fraction: f64,
    pub coverage_seed: u64,
    pub resolution_factor: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            coverage_fraction: 1.0,
            coverage_seed: 0,
            resolution_factor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `lo:hi:step`.
    pub levels: String,
    pub grid_points: usize,
    pub crps_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            levels: "0.5:0.95:0.05".into(),
            grid_points: INTERVAL_POINTS,
            crps_points: CRPS_POINTS,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses `lo:hi:step` into the inclusive level list, rounded to 1e-9 so
/// `0.5:0.95:0.05` yields exactly 0.5, 0.55, …, 0.95.
pub fn parse_levels(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |why: &str| CliError::Usage(format!("levels `{spec}`: {why}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(bad("expected lo:hi:step"));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(bad("need 0 < lo <= hi < 1"));
    }
    if !(step > 0.0) {
        return Err(bad("step must be positive"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}
