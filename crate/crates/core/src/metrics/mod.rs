//! Scoring of probabilistic and point forecasts.
//!
//! CRPS is integrated numerically on a uniform grid with the label inserted
//! as a breakpoint, so the Heaviside jump never falls inside a trapezoid.
//! Interval metrics (average width and calibration error) use the
//! high-density intervals from [`crate::interval`].

mod report;

use rayon::prelude::*;
use thiserror::Error;

use crate::gmm::{GaussianMixture, PointPrediction};
use crate::interval::{DensityGrid, HighDensityRanking, IntervalError};

pub use report::{ReportParseError, ReportSections, NOT_APPLICABLE, REPORT_HEADER};

/// Default number of integration points for CRPS.
pub const CRPS_POINTS: usize = 2001;
/// Default number of density points for interval derivation.
pub const INTERVAL_POINTS: usize = 500;
/// Targets with `|y|` below this are left out of MAPE.
pub const MAPE_EPSILON: f64 = 1e-3;
/// Half-width of the CRPS integration range in units of the largest
/// component standard deviation.
pub const CRPS_TAIL_SIGMAS: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("nothing to score")]
    Empty,
    #[error("{predictions} predictions but {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("{elements} elements do not split into whole horizons of {horizon} steps")]
    Horizon { elements: usize, horizon: usize },
    #[error("label {y} lies outside the integration range [{lo}, {hi}]")]
    LabelOutsideGrid { y: f64, lo: f64, hi: f64 },
    #[error("integration needs at least 2 points and a non-empty range")]
    BadGrid,
    #[error("batch mixes point and distributional predictions")]
    MixedPredictions,
    #[error("no confidence levels given")]
    NoLevels,
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

/// A scored prediction: either a full mixture or a point value.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Mixture(GaussianMixture),
    Point(PointPrediction),
}

impl Prediction {
    pub fn point_estimate(&self) -> f64 {
        match self {
            Prediction::Mixture(m) => m.bayesian_average().value,
            Prediction::Point(p) => p.value,
        }
    }
}

/// CRPS of a mixture against label `y` by trapezoidal integration of
/// `(F(x) − H(x − y))²` over `points` evenly spaced nodes on `[lo, hi]`.
pub fn crps_mixture(
    m: &GaussianMixture,
    y: f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<f64, MetricsError> {
    if points < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(MetricsError::BadGrid);
    }
    if !(lo <= y && y <= hi) {
        return Err(MetricsError::LabelOutsideGrid { y, lo, hi });
    }
    let dx = (hi - lo) / (points - 1) as f64;
    let mut cdf = m.cdf_grid(lo, dx, points);
    cdf[points - 1] = m.cdf(hi);
    let fy = m.cdf(y);
    let mut total = 0.0;
    for i in 1..points {
        let a = lo + (i - 1) as f64 * dx;
        let b = if i == points - 1 { hi } else { lo + i as f64 * dx };
        let (fa, fb) = (cdf[i - 1], cdf[i]);
        total += if b <= y {
            0.5 * (fa * fa + fb * fb) * (b - a)
        } else if a >= y {
            let (ga, gb) = (1.0 - fa, 1.0 - fb);
            0.5 * (ga * ga + gb * gb) * (b - a)
        } else {
            let gy = 1.0 - fy;
            let gb = 1.0 - fb;
            0.5 * (fa * fa + fy * fy) * (y - a) + 0.5 * (gy * gy + gb * gb) * (b - y)
        };
    }
    Ok(total)
}

/// Integration range covering the mixture's ±8σ support and the label.
pub fn crps_range(m: &GaussianMixture, y: f64) -> (f64, f64) {
    let pad = CRPS_TAIL_SIGMAS * m.max_std();
    (m.min_mean().min(y) - pad, m.max_mean().max(y) + pad)
}

/// [`crps_mixture`] over [`crps_range`].
pub fn crps_mixture_auto(m: &GaussianMixture, y: f64, points: usize) -> f64 {
    let (lo, hi) = crps_range(m, y);
    crps_mixture(m, y, lo, hi, points).expect("range covers the label by construction")
}

/// CRPS of a point forecast, which is its absolute error.
pub fn crps_point(p: PointPrediction, y: f64) -> f64 {
    (p.value - y).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterministicScores {
    pub mae: f64,
    /// Percent. `None` when every target falls under the MAPE epsilon.
    pub mape: Option<f64>,
    pub rmse: f64,
}

pub fn deterministic_scores(
    points: &[f64],
    targets: &[f64],
    mape_epsilon: f64,
) -> Result<DeterministicScores, MetricsError> {
    if points.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: points.len(),
            targets: targets.len(),
        });
    }
    if points.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = points.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    for (&p, &y) in points.iter().zip(targets) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= mape_epsilon {
            pct += (e / y).abs();
            pct_n += 1;
        }
    }
    Ok(DeterministicScores {
        mae: abs / n,
        mape: (pct_n > 0).then(|| 100.0 * pct / pct_n as f64),
        rmse: (sq / n).sqrt(),
    })
}

/// The ten default confidence levels 0.50, 0.55, …, 0.95.
pub fn default_levels() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub levels: Vec<f64>,
    /// Range and resolution of the density grid used for intervals.
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub interval_points: usize,
    pub crps_points: usize,
    pub mape_epsilon: f64,
}

impl EvalConfig {
    /// Interval grid on `[lo, hi]`, other settings at their defaults.
    pub fn with_interval_range(lo: f64, hi: f64) -> Self {
        Self {
            levels: default_levels(),
            interval_lo: lo,
            interval_hi: hi,
            interval_points: INTERVAL_POINTS,
            crps_points: CRPS_POINTS,
            mape_epsilon: MAPE_EPSILON,
        }
    }
}

/// Predictions and aligned targets. Element `e` belongs to horizon step
/// `e % horizon`.
#[derive(Debug, Clone, Copy)]
pub struct ScoringBatch<'a> {
    pub predictions: &'a [Prediction],
    pub targets: &'a [f64],
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonStats {
    /// 1-based output step.
    pub step: usize,
    pub crps: f64,
    pub maw: Option<f64>,
    pub mcce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub level: f64,
    pub coverage: f64,
    /// Average interval width at this level.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub elements: usize,
    pub horizon: usize,
    pub crps_mean: f64,
    pub maw: Option<f64>,
    pub mcce: Option<f64>,
    pub per_horizon: Vec<HorizonStats>,
    /// Empty for point forecasts.
    pub calibration_curve: Vec<CalibrationPoint>,
    pub mae: f64,
    pub mape: Option<f64>,
    pub rmse: f64,
    /// Interval grids whose mass fell below the mass-complete threshold.
    pub clipped_grids: usize,
}

struct ElementScore {
    crps: f64,
    point: f64,
    widths: Vec<f64>,
    hits: Vec<bool>,
    clipped: bool,
}

fn score_element(
    pred: &Prediction,
    y: f64,
    cfg: &EvalConfig,
) -> Result<ElementScore, MetricsError> {
    match pred {
        Prediction::Point(p) => Ok(ElementScore {
            crps: crps_point(*p, y),
            point: p.value,
            widths: Vec::new(),
            hits: Vec::new(),
            clipped: false,
        }),
        Prediction::Mixture(m) => {
            let crps = crps_mixture_auto(m, y, cfg.crps_points);
            let grid =
                DensityGrid::from_mixture(m, cfg.interval_lo, cfg.interval_hi, cfg.interval_points)?;
            let ranking = HighDensityRanking::new(&grid)?;
            let mut widths = Vec::with_capacity(cfg.levels.len());
            let mut hits = Vec::with_capacity(cfg.levels.len());
            for &c in &cfg.levels {
                let set = ranking.intervals(c)?;
                widths.push(set.width());
                hits.push(set.contains(y));
            }
            Ok(ElementScore {
                crps,
                point: m.bayesian_average().value,
                widths,
                hits,
                clipped: !grid.is_mass_complete(),
            })
        }
    }
}

/// Full metric suite over a batch.
///
/// Elements are scored independently (in parallel) and reduced in index
/// order, so the result does not depend on thread scheduling.
pub fn evaluate(batch: ScoringBatch<'_>, cfg: &EvalConfig) -> Result<EvaluationReport, MetricsError> {
    let ScoringBatch {
        predictions,
        targets,
        horizon,
    } = batch;
    if predictions.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    if horizon == 0 || predictions.len() % horizon != 0 {
        return Err(MetricsError::Horizon {
            elements: predictions.len(),
            horizon,
        });
    }
    if cfg.levels.is_empty() {
        return Err(MetricsError::NoLevels);
    }
    let distributional = matches!(predictions[0], Prediction::Mixture(_));
    if predictions
        .iter()
        .any(|p| matches!(p, Prediction::Mixture(_)) != distributional)
    {
        return Err(MetricsError::MixedPredictions);
    }

    let scores: Vec<ElementScore> = predictions
        .par_iter()
        .zip(targets.par_iter())
        .map(|(p, &y)| score_element(p, y, cfg))
        .collect::<Result<_, _>>()?;

    let n = scores.len();
    let n_levels = cfg.levels.len();
    let per_step = n / horizon;

    let mut crps_sum = 0.0;
    let mut step_crps = vec![0.0; horizon];
    let mut width_sum = vec![0.0; n_levels];
    let mut hit_count = vec![0usize; n_levels];
    let mut step_width = vec![vec![0.0; n_levels]; horizon];
    let mut step_hits = vec![vec![0usize; n_levels]; horizon];
    let mut clipped_grids = 0;
    for (e, s) in scores.iter().enumerate() {
        let t = e % horizon;
        crps_sum += s.crps;
        step_crps[t] += s.crps;
        clipped_grids += usize::from(s.clipped);
        for l in 0..s.widths.len() {
            width_sum[l] += s.widths[l];
            step_width[t][l] += s.widths[l];
            if s.hits[l] {
                hit_count[l] += 1;
                step_hits[t][l] += 1;
            }
        }
    }
    if clipped_grids > 0 {
        log::warn!(
            "{clipped_grids} of {n} interval grids hold less than {} of the mass",
            crate::interval::MASS_COMPLETE_MIN
        );
    }

    let calibration_curve: Vec<CalibrationPoint> = if distributional {
        cfg.levels
            .iter()
            .enumerate()
            .map(|(l, &level)| CalibrationPoint {
                level,
                coverage: hit_count[l] as f64 / n as f64,
                width: width_sum[l] / n as f64,
            })
            .collect()
    } else {
        Vec::new()
    };
    let (maw, mcce) = if distributional {
        let (maw, mcce) = interval_summary(&calibration_curve);
        (Some(maw), Some(mcce))
    } else {
        (None, None)
    };

    let per_horizon = (0..horizon)
        .map(|t| {
            let (maw, mcce) = if distributional {
                let curve: Vec<CalibrationPoint> = cfg
                    .levels
                    .iter()
                    .enumerate()
                    .map(|(l, &level)| CalibrationPoint {
                        level,
                        coverage: step_hits[t][l] as f64 / per_step as f64,
                        width: step_width[t][l] / per_step as f64,
                    })
                    .collect();
                let (maw, mcce) = interval_summary(&curve);
                (Some(maw), Some(mcce))
            } else {
                (None, None)
            };
            HorizonStats {
                step: t + 1,
                crps: step_crps[t] / per_step as f64,
                maw,
                mcce,
            }
        })
        .collect();

    let points: Vec<f64> = scores.iter().map(|s| s.point).collect();
    let det = deterministic_scores(&points, targets, cfg.mape_epsilon)?;

    Ok(EvaluationReport {
        elements: n,
        horizon,
        crps_mean: crps_sum / n as f64,
        maw,
        mcce,
        per_horizon,
        calibration_curve,
        mae: det.mae,
        mape: det.mape,
        rmse: det.rmse,
        clipped_grids,
    })
}

/// `(mAW, mCCE)` from a calibration curve.
pub fn interval_summary(curve: &[CalibrationPoint]) -> (f64, f64) {
    let k = curve.len() as f64;
    let maw = curve.iter().map(|p| p.width).sum::<f64>() / k;
    let mcce = curve
        .iter()
        .map(|p| (p.coverage.min(1.0) - p.level).abs())
        .sum::<f64>()
        / k;
    (maw, mcce)
}
