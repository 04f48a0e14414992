//! Univariate Gaussian mixtures.
//!
//! A [`GaussianMixture`] is the per-element predictive distribution emitted by
//! the mixture head: `K` weights, means and variances. Everything downstream
//! (training loss, intervals, CRPS) goes through the functions here.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Lower clamp applied to predicted log-variances before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
/// Upper clamp applied to predicted log-variances before exponentiation.
pub const LOG_VAR_MAX: f64 = 10.0;

/// Weight sums within this distance of one are taken as-is.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;
/// Weight sums within this distance of one are renormalized; beyond it the
/// mixture is rejected.
pub const WEIGHT_RENORM_TOL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("component arrays disagree in length: {weights} weights, {means} means, {variances} variances")]
    LengthMismatch {
        weights: usize,
        means: usize,
        variances: usize,
    },
    #[error("weight {index} is {value}, expected a finite non-negative number")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, outside tolerance of 1")]
    WeightSum { sum: f64 },
    #[error("mean {index} is not finite ({value})")]
    BadMean { index: usize, value: f64 },
    #[error("variance {index} is {value}, expected finite and > 0")]
    BadVariance { index: usize, value: f64 },
}

/// Scalar prediction from a deterministic model, or a point estimate
/// extracted from a mixture. Scored as a Dirac mass at `value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    pub value: f64,
}

impl PointPrediction {
    pub fn new(value: f64) -> Self {
        debug_assert!(value.is_finite());
        Self { value }
    }
}

/// A validated univariate Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// Gradient of the element-wise NLL with respect to the head's trainable
/// outputs: pre-softmax logits, means and log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGradients {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_variances: Vec<f64>,
}

impl GaussianMixture {
    /// Builds a mixture after checking the invariants. Weight sums off by
    /// less than [`WEIGHT_RENORM_TOL`] are renormalized.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self, GmmError> {
        if weights.len() != means.len() || weights.len() != variances.len() {
            return Err(GmmError::LengthMismatch {
                weights: weights.len(),
                means: means.len(),
                variances: variances.len(),
            });
        }
        if weights.is_empty() {
            return Err(GmmError::Empty);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(GmmError::BadWeight { index, value });
            }
        }
        for (index, &value) in means.iter().enumerate() {
            if !value.is_finite() {
                return Err(GmmError::BadMean { index, value });
            }
        }
        for (index, &value) in variances.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(GmmError::BadVariance { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        let dev = (sum - 1.0).abs();
        let weights = if dev <= WEIGHT_SUM_TOL {
            weights
        } else if dev <= WEIGHT_RENORM_TOL {
            weights.into_iter().map(|w| w / sum).collect()
        } else {
            return Err(GmmError::WeightSum { sum });
        };
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single Gaussian `N(mean, variance)`.
    pub fn normal(mean: f64, variance: f64) -> Result<Self, GmmError> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    /// Builds a mixture from head outputs: softmax over `logits`, and
    /// `exp(clamp(log_variance))` for the variances.
    pub fn from_head_outputs(
        logits: &[f64],
        means: &[f64],
        log_variances: &[f64],
    ) -> Result<Self, GmmError> {
        let weights = softmax(logits);
        let variances = log_variances.iter().map(|&lv| clamped_variance(lv)).collect();
        Self::new(weights, means.to_vec(), variances)
    }

    /// Single component at `value` with the smallest admissible variance.
    pub fn near_dirac(value: f64) -> Result<Self, GmmError> {
        Self::normal(value, LOG_VAR_MIN.exp())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn max_std(&self) -> f64 {
        self.variances.iter().fold(0.0f64, |a, &v| a.max(v)).sqrt()
    }

    pub fn min_mean(&self) -> f64 {
        self.means.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_mean(&self) -> f64 {
        self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-component `log π_k + log N(x; μ_k, σ_k²)`.
    fn component_log_terms(&self, x: f64) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(move |((&w, &mu), &var)| {
                let d = x - mu;
                w.ln() - d * d / (2.0 * var) - 0.5 * (LN_2PI + var.ln())
            })
    }

    /// `log p(x)` by log-sum-exp over the component terms.
    pub fn log_density(&self, x: f64) -> f64 {
        log_sum_exp(self.component_log_terms(x))
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// Negative log-likelihood of an observation.
    pub fn nll(&self, y: f64) -> f64 {
        -self.log_density(y)
    }

    /// Posterior component probabilities given an observation.
    pub fn responsibilities(&self, y: f64) -> Vec<f64> {
        let terms: Vec<f64> = self.component_log_terms(y).collect();
        let lse = log_sum_exp(terms.iter().copied());
        terms.into_iter().map(|t| (t - lse).exp()).collect()
    }

    /// Exact gradient of [`nll`](Self::nll) with respect to logits, means and
    /// log-variances.
    pub fn nll_gradients(&self, y: f64) -> NllGradients {
        let k = self.k();
        let mut g = NllGradients {
            logits: vec![0.0; k],
            means: vec![0.0; k],
            log_variances: vec![0.0; k],
        };
        nll_with_gradients(
            &self.weights,
            &self.means,
            &self.variances,
            y,
            &mut g.logits,
            &mut g.means,
            &mut g.log_variances,
        );
        g
    }

    /// Mixture CDF, `Σ π_k Φ((x − μ_k)/σ_k)`.
    pub fn cdf(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for ((&w, &mu), &var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            acc += w * std_normal_cdf((x - mu) / var.sqrt());
        }
        acc.clamp(0.0, 1.0)
    }

    /// Density at `lo + i·dx` for `i < points`, summed directly per component.
    pub fn density_grid(&self, lo: f64, dx: f64, points: usize) -> Vec<f64> {
        let mut out = vec![0.0; points];
        for ((&w, &mu), &var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let sd = var.sqrt();
            let scale = w / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let inv = 1.0 / sd;
            for (i, o) in out.iter_mut().enumerate() {
                let z = (lo + i as f64 * dx - mu) * inv;
                // exp underflows to zero well before |z| = 40
                if z.abs() < 40.0 {
                    *o += scale * (-0.5 * z * z).exp();
                }
            }
        }
        out
    }

    /// CDF at `lo + i·dx` for `i < points`. Components saturate outside
    /// `|z| > 9`: above, `Φ` rounds to exactly 1; below, it is under 1e-18.
    pub fn cdf_grid(&self, lo: f64, dx: f64, points: usize) -> Vec<f64> {
        const SATURATE: f64 = 9.0;
        let mut out = vec![0.0; points];
        for ((&w, &mu), &var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let sd = var.sqrt();
            for (i, o) in out.iter_mut().enumerate() {
                let x = lo + i as f64 * dx;
                let z = (x - mu) / sd;
                if z > SATURATE {
                    *o += w;
                } else if z >= -SATURATE {
                    *o += w * std_normal_cdf(z);
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Bayesian-average point estimate, the weighted sum of component means.
    pub fn bayesian_average(&self) -> PointPrediction {
        PointPrediction::new(self.mean())
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w * (v + (m - mean) * (m - mean)))
            .sum()
    }

    /// Draws `n` i.i.d. samples.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.k() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        self.means[idx] + self.variances[idx].sqrt() * z
    }

    /// Maps a mixture through `x ↦ scale·x + shift` (e.g. undoing a z-score).
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self, GmmError> {
        Self::new(
            self.weights.clone(),
            self.means.iter().map(|m| m * scale + shift).collect(),
            self.variances.iter().map(|v| v * scale * scale).collect(),
        )
    }
}

/// NLL of `y` under the mixture given by raw component slices, writing the
/// gradients with respect to logits, means and log-variances into the
/// output slices. With responsibilities `γ_k`:
///
/// - `∂/∂z_k = π_k − γ_k`
/// - `∂/∂μ_k = −γ_k (y − μ_k)/σ_k²`
/// - `∂/∂log σ_k² = −γ_k ((y − μ_k)²/(2σ_k²) − ½)`
///
/// Allocation-free; used directly by the training loop.
pub fn nll_with_gradients(
    weights: &[f64],
    means: &[f64],
    variances: &[f64],
    y: f64,
    d_logits: &mut [f64],
    d_means: &mut [f64],
    d_log_variances: &mut [f64],
) -> f64 {
    let k = weights.len();
    // log terms staged in d_logits
    for i in 0..k {
        let d = y - means[i];
        d_logits[i] =
            weights[i].ln() - d * d / (2.0 * variances[i]) - 0.5 * (LN_2PI + variances[i].ln());
    }
    let lse = log_sum_exp(d_logits.iter().copied());
    for i in 0..k {
        let gamma = (d_logits[i] - lse).exp();
        let d = y - means[i];
        let var = variances[i];
        d_logits[i] = weights[i] - gamma;
        d_means[i] = -gamma * d / var;
        d_log_variances[i] = -gamma * (d * d / (2.0 * var) - 0.5);
    }
    -lse
}

/// `exp(clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))`.
pub fn clamped_variance(log_var: f64) -> f64 {
    log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Single-pass log-sum-exp; the running sum is rescaled whenever a new
/// maximum appears.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for t in terms {
        if t == f64::NEG_INFINITY {
            continue;
        }
        if t > max {
            sum = sum * (max - t).exp() + 1.0;
            max = t;
        } else {
            sum += (t - max).exp();
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + sum.ln()
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - 0.5 * LN_2PI).exp()
}

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}
