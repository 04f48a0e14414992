//! Optimization: z-score bookkeeping, warmup + step-decay schedule, AdamW
//! and the epoch loop shared by every output variant.

use std::fmt;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::WindowSet;
use crate::gmm::PointPrediction;
use crate::metrics::{self, EvalConfig, EvaluationReport, MetricsError, Prediction, ScoringBatch};
use crate::nn::{Graph, Model, ModelConfig, ModelError};

pub const GRAD_CLIP_NORM: f64 = 5.0;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training windows")]
    NoData,
    #[error("non-finite gradient in tensor {tensor}; step rejected")]
    NonFiniteGradient { tensor: usize },
    #[error("loss diverged at epoch {epoch} (step {step})")]
    Diverged {
        epoch: usize,
        step: usize,
        /// Best model seen before divergence.
        last_good: Box<Model>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_epochs: usize,
    /// Fractions of total epochs at which the rate drops.
    pub decay_points: Vec<f64>,
    /// Multipliers of `lr` from each decay point on.
    pub decay_factors: Vec<f64>,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            warmup_epochs: 2,
            decay_points: vec![0.75, 0.85],
            decay_factors: vec![0.10, 0.01],
            grad_clip: GRAD_CLIP_NORM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.decay_points.len() != self.decay_factors.len() {
            return bad("decay points and factors differ in length");
        }
        if self.decay_points.iter().any(|&p| !(p > 0.0 && p < 1.0))
            || self.decay_points.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("decay points must be increasing within (0, 1)");
        }
        if self.decay_factors.iter().any(|&f| !(f > 0.0 && f <= 1.0))
            || self.decay_factors.windows(2).any(|w| w[0] <= w[1])
        {
            return bad("decay factors must be decreasing within (0, 1]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Z-score transform fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn new(mean: f64, std: f64) -> Result<Self, TrainError> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(TrainError::Config(format!("normalizer ({mean}, {std}) is invalid")));
        }
        Ok(Self { mean, std })
    }

    /// Population mean and standard deviation.
    pub fn fit(values: &[f64]) -> Result<Self, TrainError> {
        if values.is_empty() {
            return Err(TrainError::NoData);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Maps a prediction made in normalized space back to raw units.
    pub fn inverse_prediction(&self, p: &Prediction) -> Prediction {
        match p {
            Prediction::Mixture(m) => Prediction::Mixture(
                m.affine(self.std, self.mean).expect("positive scale keeps the mixture valid"),
            ),
            Prediction::Point(pt) => Prediction::Point(PointPrediction::new(self.inverse(pt.value))),
        }
    }
}

/// Learning rate at optimizer step `step` of `total_steps`.
///
/// Warmup ramps linearly per step over the first `warmup_epochs`; decay
/// factors switch in at epoch boundaries once `epoch / epochs` reaches a
/// decay point.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let epochs = cfg.epochs.max(1);
    let steps_per_epoch = total_steps as f64 / epochs as f64;
    let warmup = cfg.warmup_epochs as f64 * steps_per_epoch;
    let s = step as f64;
    if s < warmup {
        return cfg.lr * s / warmup;
    }
    let epoch = (s / steps_per_epoch).floor();
    let progress = epoch / epochs as f64;
    let factor = cfg
        .decay_points
        .iter()
        .zip(&cfg.decay_factors)
        .filter(|(&p, _)| progress >= p)
        .map(|(_, &f)| f)
        .last()
        .unwrap_or(1.0);
    cfg.lr * factor
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    /// Zero moments for tensors of the given lengths.
    pub fn new(shapes: &[usize], betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: ADAM_EPSILON,
            weight_decay,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &Model, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes, cfg.betas, cfg.weight_decay)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Non-finite gradients leave parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.m.len(), "tensor count");
        assert_eq!(grads.len(), self.m.len(), "tensor count");
        if let Some(tensor) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(TrainError::NonFiniteGradient { tensor });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "tensor shape");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Digest of the epoch's batch composition.
    pub batch_hash: String,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} lr={} train_loss={} val_loss={} batches={}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_loss, self.batch_hash
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub log: Vec<EpochRecord>,
    /// Digest over every epoch's batch digest.
    pub batch_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn take(a: &Array3<f64>, idx: &[usize]) -> Array3<f64> {
    a.select(Axis(0), idx)
}

/// Mean loss over `windows`, evaluated in chunks.
pub fn mean_loss(model: &Model, windows: &WindowSet, chunk: usize) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::NoData);
    }
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for c in idx.chunks(chunk.max(1)) {
        let l = model.loss(&take(&windows.inputs, c), &take(&windows.targets, c))?;
        total += l * c.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Trains a freshly initialized model on `train`, keeping the parameters
/// with the best loss on `val`.
///
/// Initialization and batch order draw from separate streams of
/// `cfg.seed`, so every output variant sees the same batch sequence.
pub fn fit(
    model_cfg: ModelConfig,
    graph: Option<Graph>,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut model = Model::new(model_cfg, graph, cfg.seed)?;
    let mut opt = AdamW::for_model(&model, cfg);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(7);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let eval_chunk = 64;

    let initial_val_loss = mean_loss(&model, val, eval_chunk)?;
    let mut best = model.clone();
    let mut best_loss = initial_val_loss;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut run_hash = Sha256::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_hash = Sha256::new();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                epoch_hash.update((i as u64).to_le_bytes());
            }
            epoch_hash.update(u64::MAX.to_le_bytes());
            let (loss, mut grad) =
                model.loss_and_grad(&take(&train.inputs, batch), &take(&train.targets, batch))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(best),
                });
            }
            loss_sum += loss * batch.len() as f64;
            clip_global_norm(&mut grad.tensors_mut(), cfg.grad_clip);
            lr = lr_at(step, total_steps, cfg);
            match opt.step(&mut model.tensors_mut(), &grad.tensors(), lr) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient { .. }) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(best),
                    })
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let val_loss = mean_loss(&model, val, eval_chunk)?;
        if !val_loss.is_finite() || !model.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step,
                last_good: Box::new(best),
            });
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            best_epoch = epoch;
        }
        let digest = epoch_hash.finalize();
        run_hash.update(digest);
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            batch_hash: hex(&digest[..8]),
        };
        log::info!("{record}");
        log.push(record);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        initial_val_loss,
        log,
        batch_hash: hex(&run_hash.finalize()),
    })
}

/// Predicts every window and maps predictions and targets to raw units
/// (or leaves both normalized when `normalizer` is `None`).
pub fn predict_windows(
    model: &Model,
    windows: &WindowSet,
    normalizer: Option<&Normalizer>,
) -> Result<(Vec<Prediction>, Vec<f64>), TrainError> {
    let mut preds = Vec::with_capacity(windows.targets.len());
    let idx: Vec<usize> = (0..windows.len()).collect();
    for c in idx.chunks(64) {
        let p = model.predict(&take(&windows.inputs, c))?;
        match normalizer {
            Some(n) => preds.extend(p.iter().map(|p| n.inverse_prediction(p))),
            None => preds.extend(p),
        }
    }
    let targets = windows
        .targets
        .iter()
        .map(|&z| normalizer.map_or(z, |n| n.inverse(z)))
        .collect();
    Ok((preds, targets))
}

/// Scores a model on `windows` with every metric.
pub fn evaluate_model(
    model: &Model,
    windows: &WindowSet,
    normalizer: Option<&Normalizer>,
    cfg: &EvalConfig,
) -> Result<EvaluationReport, TrainError> {
    let (predictions, targets) = predict_windows(model, windows, normalizer)?;
    let report = metrics::evaluate(
        ScoringBatch {
            predictions: &predictions,
            targets: &targets,
            horizon: windows.horizon,
        },
        cfg,
    )?;
    Ok(report)
}
