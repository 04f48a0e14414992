//! Probabilistic time-series forecasting with a Gaussian-mixture prediction
//! head.
//!
//! - [`gmm`]: univariate mixtures (density, NLL and its gradients, CDF, sampling)
//! - [`interval`]: high-density confidence intervals from a density grid
//! - [`metrics`]: CRPS, interval width and calibration scoring
//! - [`nn`]: per-node backbone with mixture or point output layer
//! - [`training`]: AdamW, learning-rate schedule, training loop
//! - [`data`]: synthetic regime-switching traffic data, degradation, windowing, CSV

pub mod gmm;
pub mod interval;
pub mod metrics;
pub mod nn;
pub mod training;
pub mod data;
