//! Trainable forecaster: a per-node MLP backbone followed by either the
//! Gaussian-mixture head or a single linear point-output layer.
//!
//! Gradients are computed by hand. Each layer caches what its backward pass
//! needs in [`Forward`]; [`Model::loss_and_grad`] returns a gradient with the
//! same shape as the model.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{
    clamped_variance, nll_with_gradients, softmax_into, GaussianMixture, GmmError,
    PointPrediction, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::metrics::Prediction;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_HEADER};

/// Spread of the normalized data covered by the reference means, ±3σ.
pub const REFERENCE_SPAN: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at element {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error(transparent)]
    Mixture(#[from] GmmError),
}

/// Output-layer variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Point prediction trained on MAE.
    Det,
    /// Single Gaussian (mixture head with one component).
    Norm,
    /// K-component Gaussian mixture.
    Gmm,
}

impl Variant {
    pub fn is_probabilistic(self) -> bool {
        !matches!(self, Variant::Det)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Det => "det",
            Variant::Norm => "norm",
            Variant::Gmm => "gmm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "det" => Ok(Variant::Det),
            "norm" => Ok(Variant::Norm),
            "gmm" => Ok(Variant::Gmm),
            other => Err(ModelError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Geometry of the mixture head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub components: usize,
    pub projection_dim: usize,
    /// Multiplier applied to the predicted mean offsets.
    pub scale: f64,
    /// Fixed per-component mean anchors.
    pub reference: Vec<f64>,
    /// Output steps.
    pub horizon: usize,
}

impl HeadConfig {
    /// Default geometry for `components` components: `(K + 1)·s = 6` and
    /// `r_k = s·(k − (K + 1)/2)`, which gives `s = 1`, `r = [−2, −1, 0, 1, 2]`
    /// for `K = 5`.
    pub fn new(components: usize, projection_dim: usize, horizon: usize) -> Self {
        let scale = REFERENCE_SPAN / (components + 1) as f64;
        let mid = (components + 1) as f64 / 2.0;
        let reference = (1..=components).map(|k| scale * (k as f64 - mid)).collect();
        Self {
            components,
            projection_dim,
            scale,
            reference,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.components == 0 || self.projection_dim == 0 || self.horizon == 0 {
            return Err(ModelError::Config(
                "components, projection_dim and horizon must be positive".into(),
            ));
        }
        if self.reference.len() != self.components {
            return Err(ModelError::Config(format!(
                "{} reference values for {} components",
                self.reference.len(),
                self.components
            )));
        }
        if self.reference.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Config("reference values must increase".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(ModelError::Config("scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Features per node and sample (history window plus side channels).
    pub input_dim: usize,
    pub hidden: usize,
    pub features: usize,
    /// Weight of the neighbourhood-averaging step; ignored without a graph.
    pub graph_alpha: f64,
}

impl BackboneConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 64,
            features: 64,
            graph_alpha: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Defaults for a variant. `Norm` forces a single component and `Det`
    /// ignores the mixture geometry except for the horizon.
    pub fn new(variant: Variant, input_dim: usize, horizon: usize, components: usize) -> Self {
        let k = match variant {
            Variant::Gmm => components,
            Variant::Norm | Variant::Det => 1,
        };
        Self {
            variant,
            backbone: BackboneConfig::new(input_dim),
            head: HeadConfig::new(k, 64, horizon),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let b = &self.backbone;
        if b.input_dim == 0 || b.hidden == 0 || b.features == 0 {
            return Err(ModelError::Config("backbone widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&b.graph_alpha) {
            return Err(ModelError::Config("graph_alpha must lie in [0, 1]".into()));
        }
        if self.variant == Variant::Norm && self.head.components != 1 {
            return Err(ModelError::Config("norm variant has exactly one component".into()));
        }
        self.head.validate()
    }
}

/// Fully connected layer, `y = x Wᵀ + b`, weight stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-a..a));
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight)
    }

    fn accumulate(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    fn zeroed(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }
}

/// Row-normalized adjacency used by the optional graph-mixing step.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    norm: Array2<f64>,
}

impl Graph {
    /// Row-normalizes a non-negative `n × n` weight matrix. Rows without
    /// neighbours keep their own features.
    pub fn from_adjacency(adjacency: Array2<f64>) -> Result<Self, ModelError> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(ModelError::Shape(format!(
                "adjacency must be square, got {n}×{}",
                adjacency.ncols()
            )));
        }
        if adjacency.iter().any(|&a| !(a.is_finite() && a >= 0.0)) {
            return Err(ModelError::Config("adjacency weights must be finite and >= 0".into()));
        }
        let mut norm = adjacency;
        for (i, mut row) in norm.rows_mut().into_iter().enumerate() {
            let sum = row.sum();
            if sum > 0.0 {
                row /= sum;
            } else {
                row[i] = 1.0;
            }
        }
        Ok(Self { norm })
    }

    /// Undirected chain `0 − 1 − … − (n−1)`.
    pub fn chain(n: usize) -> Self {
        let mut a = Array2::zeros((n, n));
        for i in 1..n {
            a[[i - 1, i]] = 1.0;
            a[[i, i - 1]] = 1.0;
        }
        Self::from_adjacency(a).expect("chain adjacency is valid")
    }

    pub fn nodes(&self) -> usize {
        self.norm.nrows()
    }

    pub fn normalized(&self) -> &Array2<f64> {
        &self.norm
    }
}

/// Projection plus the three mixture branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureHead {
    pub projection: Linear,
    pub mixing: Linear,
    pub mean: Linear,
    pub log_variance: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputLayer {
    Mixture(MixtureHead),
    Point(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub hidden: Linear,
    pub features: Linear,
    pub output: OutputLayer,
    graph: Option<Graph>,
}

/// Activations cached by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    batch: usize,
    nodes: usize,
    x: Array2<f64>,
    h: Array2<f64>,
    z0: Array2<f64>,
    z: Array2<f64>,
    out: HeadOutputs,
}

#[derive(Debug, Clone)]
enum HeadOutputs {
    Mixture {
        zp: Array2<f64>,
        logits: Array2<f64>,
        /// Final means, `offset·s + r`.
        means: Array2<f64>,
        /// Log-variances before clamping.
        log_variances: Array2<f64>,
    },
    Point(Array2<f64>),
}

impl Model {
    /// Initializes a model. Backbone and projection weights are drawn from a
    /// seeded generator; the mixture branches start at zero weights with
    /// mixing bias `1/K`, so the fresh model predicts equal weights, means at
    /// the reference values and unit variances for every input.
    pub fn new(config: ModelConfig, graph: Option<Graph>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &config.backbone;
        let h = &config.head;
        let hidden = Linear::xavier(b.input_dim, b.hidden, &mut rng);
        let features = Linear::xavier(b.hidden, b.features, &mut rng);
        let width = h.horizon * h.components;
        let output = match config.variant {
            Variant::Det => OutputLayer::Point(Linear::xavier(b.features, h.horizon, &mut rng)),
            Variant::Norm | Variant::Gmm => {
                let projection = Linear::xavier(b.features, h.projection_dim, &mut rng);
                let mut mixing = Linear::zeros(h.projection_dim, width);
                mixing.bias.fill(1.0 / h.components as f64);
                OutputLayer::Mixture(MixtureHead {
                    projection,
                    mixing,
                    mean: Linear::zeros(h.projection_dim, width),
                    log_variance: Linear::zeros(h.projection_dim, width),
                })
            }
        };
        Ok(Self {
            config,
            hidden,
            features,
            output,
            graph,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn horizon(&self) -> usize {
        self.config.head.horizon
    }

    /// All layers in a fixed order with stable names.
    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![("backbone.hidden", &self.hidden), ("backbone.features", &self.features)];
        match &self.output {
            OutputLayer::Mixture(h) => v.extend([
                ("head.projection", &h.projection),
                ("head.mixing", &h.mixing),
                ("head.mean", &h.mean),
                ("head.log_variance", &h.log_variance),
            ]),
            OutputLayer::Point(l) => v.push(("head.point", l)),
        }
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = vec![
            ("backbone.hidden", &mut self.hidden),
            ("backbone.features", &mut self.features),
        ];
        match &mut self.output {
            OutputLayer::Mixture(h) => v.extend([
                ("head.projection", &mut h.projection),
                ("head.mixing", &mut h.mixing),
                ("head.mean", &mut h.mean),
                ("head.log_variance", &mut h.log_variance),
            ]),
            OutputLayer::Point(l) => v.push(("head.point", l)),
        }
        v
    }

    /// A model of the same shape with every parameter zero; used as the
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let output = match &self.output {
            OutputLayer::Mixture(h) => OutputLayer::Mixture(MixtureHead {
                projection: h.projection.zeroed(),
                mixing: h.mixing.zeroed(),
                mean: h.mean.zeroed(),
                log_variance: h.log_variance.zeroed(),
            }),
            OutputLayer::Point(l) => OutputLayer::Point(l.zeroed()),
        };
        Self {
            config: self.config.clone(),
            hidden: self.hidden.zeroed(),
            features: self.features.zeroed(),
            output,
            graph: self.graph.clone(),
        }
    }

    /// Every parameter tensor as a flat slice, in [`layers`](Self::layers)
    /// order with weight before bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|(_, l)| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(_, l)| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, l)| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|(_, l)| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_inputs(&self, inputs: &Array3<f64>) -> Result<(), ModelError> {
        let (_, n, f) = inputs.dim();
        if f != self.config.backbone.input_dim {
            return Err(ModelError::Shape(format!(
                "inputs carry {f} features per node, model expects {}",
                self.config.backbone.input_dim
            )));
        }
        if let Some(g) = &self.graph {
            if g.nodes() != n {
                return Err(ModelError::Shape(format!(
                    "inputs have {n} nodes, graph has {}",
                    g.nodes()
                )));
            }
        }
        Ok(())
    }

    /// Backbone features `z`, one row per (sample, node).
    fn backbone(&self, inputs: &Array3<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let (b, n, f) = inputs.dim();
        let x = inputs
            .to_shape((b * n, f))
            .expect("contiguous input")
            .to_owned();
        let h = self.hidden.forward(&x).mapv_into(f64::tanh);
        let z0 = self.features.forward(&h).mapv_into(f64::tanh);
        let alpha = self.config.backbone.graph_alpha;
        let z = match &self.graph {
            Some(g) if alpha != 0.0 => {
                let mut z = z0.clone();
                for s in 0..b {
                    let block = z0.slice(s![s * n..(s + 1) * n, ..]);
                    let mixed = g.normalized().dot(&block);
                    let mut out = z.slice_mut(s![s * n..(s + 1) * n, ..]);
                    out *= 1.0 - alpha;
                    out.scaled_add(alpha, &mixed);
                }
                z
            }
            _ => z0.clone(),
        };
        (x, h, z0, z)
    }

    /// Backbone only: `(B·N) × D` features.
    pub fn backbone_forward(&self, inputs: &Array3<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_inputs(inputs)?;
        Ok(self.backbone(inputs).3)
    }

    pub fn forward(&self, inputs: &Array3<f64>) -> Result<Forward, ModelError> {
        self.check_inputs(inputs)?;
        let (batch, nodes, _) = inputs.dim();
        let (x, h, z0, z) = self.backbone(inputs);
        let out = match &self.output {
            OutputLayer::Point(l) => HeadOutputs::Point(l.forward(&z)),
            OutputLayer::Mixture(head) => {
                let (zp, logits, means, log_variances) = self.head_forward(head, &z);
                HeadOutputs::Mixture {
                    zp,
                    logits,
                    means,
                    log_variances,
                }
            }
        };
        Ok(Forward {
            batch,
            nodes,
            x,
            h,
            z0,
            z,
            out,
        })
    }

    fn head_forward(
        &self,
        head: &MixtureHead,
        z: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let cfg = &self.config.head;
        let zp = head.projection.forward(z);
        let logits = head.mixing.forward(&zp);
        let mut means = head.mean.forward(&zp);
        let k = cfg.components;
        for mut row in means.rows_mut() {
            for (j, m) in row.iter_mut().enumerate() {
                *m = *m * cfg.scale + cfg.reference[j % k];
            }
        }
        let log_variances = head.log_variance.forward(&zp);
        (zp, logits, means, log_variances)
    }

    /// Mixture head applied to backbone features `z` (one row per node).
    pub fn head_forward_features(&self, z: &Array2<f64>) -> Result<Vec<GaussianMixture>, ModelError> {
        let OutputLayer::Mixture(head) = &self.output else {
            return Err(ModelError::Config("point model has no mixture head".into()));
        };
        if z.ncols() != head.projection.input_dim() {
            return Err(ModelError::Shape(format!(
                "features have {} columns, head expects {}",
                z.ncols(),
                head.projection.input_dim()
            )));
        }
        let (_, logits, means, log_variances) = self.head_forward(head, z);
        mixtures_from(&self.config.head, &logits, &means, &log_variances)
    }

    /// Predictions ordered by (sample, node, step).
    pub fn predict(&self, inputs: &Array3<f64>) -> Result<Vec<Prediction>, ModelError> {
        let fwd = self.forward(inputs)?;
        fwd.predictions(&self.config.head)
    }

    /// Mean loss (NLL for mixtures, MAE for point output) and predictions.
    pub fn forward_loss(
        &self,
        inputs: &Array3<f64>,
        targets: &Array3<f64>,
    ) -> Result<(f64, Vec<Prediction>), ModelError> {
        let fwd = self.forward(inputs)?;
        let (loss, _) = self.loss_from(&fwd, targets, false)?;
        Ok((loss, fwd.predictions(&self.config.head)?))
    }

    pub fn loss(&self, inputs: &Array3<f64>, targets: &Array3<f64>) -> Result<f64, ModelError> {
        let fwd = self.forward(inputs)?;
        Ok(self.loss_from(&fwd, targets, false)?.0)
    }

    /// Mean loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        inputs: &Array3<f64>,
        targets: &Array3<f64>,
    ) -> Result<(f64, Model), ModelError> {
        let fwd = self.forward(inputs)?;
        let (loss, d_out) = self.loss_from(&fwd, targets, true)?;
        let d_out = d_out.expect("requested");
        Ok((loss, self.backward(&fwd, d_out)))
    }

    /// Loss and, on request, its gradient with respect to the raw head
    /// outputs.
    fn loss_from(
        &self,
        fwd: &Forward,
        targets: &Array3<f64>,
        want_grad: bool,
    ) -> Result<(f64, Option<HeadGrad>), ModelError> {
        let t_f = self.config.head.horizon;
        let (b, n, t) = targets.dim();
        if (b, n, t) != (fwd.batch, fwd.nodes, t_f) {
            return Err(ModelError::Shape(format!(
                "targets are {b}×{n}×{t}, predictions are {}×{}×{t_f}",
                fwd.batch, fwd.nodes
            )));
        }
        let y = targets.to_shape((b * n, t)).expect("contiguous targets");
        let count = (b * n * t) as f64;
        match &fwd.out {
            HeadOutputs::Point(pred) => {
                let mut total = 0.0;
                let mut d = want_grad.then(|| Array2::zeros(pred.raw_dim()));
                for ((r, c), &p) in pred.indexed_iter() {
                    let e = p - y[[r, c]];
                    if !e.is_finite() {
                        return Err(ModelError::NonFinite {
                            what: "prediction",
                            index: r * t + c,
                        });
                    }
                    total += e.abs();
                    if let Some(d) = d.as_mut() {
                        d[[r, c]] = e.signum() * f64::from(u8::from(e != 0.0)) / count;
                    }
                }
                Ok((total / count, d.map(HeadGrad::Point)))
            }
            HeadOutputs::Mixture {
                logits,
                means,
                log_variances,
                ..
            } => {
                let cfg = &self.config.head;
                let k = cfg.components;
                let mut grads = want_grad.then(|| {
                    (
                        Array2::zeros(logits.raw_dim()),
                        Array2::zeros(means.raw_dim()),
                        Array2::zeros(log_variances.raw_dim()),
                    )
                });
                let mut pi = vec![0.0; k];
                let mut var = vec![0.0; k];
                let mut dl = vec![0.0; k];
                let mut dm = vec![0.0; k];
                let mut dv = vec![0.0; k];
                let mut total = 0.0;
                for r in 0..b * n {
                    let lrow = logits.row(r);
                    let mrow = means.row(r);
                    let vrow = log_variances.row(r);
                    for step in 0..t {
                        let range = step * k..(step + 1) * k;
                        let l = lrow.slice(s![range.clone()]);
                        let mu = mrow.slice(s![range.clone()]);
                        let lv = vrow.slice(s![range.clone()]);
                        softmax_into(l.as_slice().expect("row-major"), &mut pi);
                        for (v, &raw) in var.iter_mut().zip(lv.iter()) {
                            *v = clamped_variance(raw);
                        }
                        let nll = nll_with_gradients(
                            &pi,
                            mu.as_slice().expect("row-major"),
                            &var,
                            y[[r, step]],
                            &mut dl,
                            &mut dm,
                            &mut dv,
                        );
                        if !nll.is_finite() {
                            return Err(ModelError::NonFinite {
                                what: "loss",
                                index: r * t + step,
                            });
                        }
                        total += nll;
                        if let Some((gl, gm, gv)) = grads.as_mut() {
                            for j in 0..k {
                                let c = step * k + j;
                                gl[[r, c]] = dl[j] / count;
                                gm[[r, c]] = dm[j] * cfg.scale / count;
                                let raw = lv[j];
                                // clamp passes gradient only strictly inside
                                if raw > LOG_VAR_MIN && raw < LOG_VAR_MAX {
                                    gv[[r, c]] = dv[j] / count;
                                }
                            }
                        }
                    }
                }
                Ok((
                    total / count,
                    grads.map(|(logits, means, log_variances)| HeadGrad::Mixture {
                        logits,
                        offsets: means,
                        log_variances,
                    }),
                ))
            }
        }
    }

    fn backward(&self, fwd: &Forward, d_out: HeadGrad) -> Model {
        let mut grad = self.zeros_like();
        let dz = match (&self.output, &fwd.out, d_out, &mut grad.output) {
            (OutputLayer::Point(l), HeadOutputs::Point(_), HeadGrad::Point(d), OutputLayer::Point(g)) => {
                l.backward(&fwd.z, &d, g)
            }
            (
                OutputLayer::Mixture(head),
                HeadOutputs::Mixture { zp, .. },
                HeadGrad::Mixture {
                    logits,
                    offsets,
                    log_variances,
                },
                OutputLayer::Mixture(g),
            ) => {
                let mut dzp = head.mixing.backward(zp, &logits, &mut g.mixing);
                dzp += &head.mean.backward(zp, &offsets, &mut g.mean);
                dzp += &head.log_variance.backward(zp, &log_variances, &mut g.log_variance);
                head.projection.backward(&fwd.z, &dzp, &mut g.projection)
            }
            _ => unreachable!("head outputs match the output layer"),
        };

        let alpha = self.config.backbone.graph_alpha;
        let dz0 = match &self.graph {
            Some(gr) if alpha != 0.0 => {
                let n = fwd.nodes;
                let mut dz0 = dz.clone();
                let at = gr.normalized().t();
                for smp in 0..fwd.batch {
                    let block = dz.slice(s![smp * n..(smp + 1) * n, ..]);
                    let back = at.dot(&block);
                    let mut out = dz0.slice_mut(s![smp * n..(smp + 1) * n, ..]);
                    out *= 1.0 - alpha;
                    out.scaled_add(alpha, &back);
                }
                dz0
            }
            _ => dz,
        };
        let da2 = dz0 * fwd.z0.mapv(|z| 1.0 - z * z);
        let dh = self.features.backward(&fwd.h, &da2, &mut grad.features);
        let da1 = dh * fwd.h.mapv(|h| 1.0 - h * h);
        self.hidden.accumulate(&fwd.x, &da1, &mut grad.hidden);
        grad
    }
}

enum HeadGrad {
    Point(Array2<f64>),
    Mixture {
        logits: Array2<f64>,
        /// Gradient w.r.t. the mean-branch output (offset), already scaled by s.
        offsets: Array2<f64>,
        log_variances: Array2<f64>,
    },
}

fn mixtures_from(
    cfg: &HeadConfig,
    logits: &Array2<f64>,
    means: &Array2<f64>,
    log_variances: &Array2<f64>,
) -> Result<Vec<GaussianMixture>, ModelError> {
    let k = cfg.components;
    let mut out = Vec::with_capacity(logits.len() / k);
    for r in 0..logits.nrows() {
        for step in 0..cfg.horizon {
            let range = step * k..(step + 1) * k;
            let l = logits.slice(s![r, range.clone()]).to_vec();
            let m = means.slice(s![r, range.clone()]).to_vec();
            let v = log_variances.slice(s![r, range]).to_vec();
            if l.iter().chain(&m).chain(&v).any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite {
                    what: "head output",
                    index: r * cfg.horizon + step,
                });
            }
            out.push(GaussianMixture::from_head_outputs(&l, &m, &v)?);
        }
    }
    Ok(out)
}

impl Forward {
    /// Predictions ordered by (sample, node, step).
    pub fn predictions(&self, cfg: &HeadConfig) -> Result<Vec<Prediction>, ModelError> {
        match &self.out {
            HeadOutputs::Point(p) => p
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v.is_finite() {
                        Ok(Prediction::Point(PointPrediction::new(v)))
                    } else {
                        Err(ModelError::NonFinite {
                            what: "prediction",
                            index: i,
                        })
                    }
                })
                .collect(),
            HeadOutputs::Mixture {
                logits,
                means,
                log_variances,
                ..
            } => Ok(mixtures_from(cfg, logits, means, log_variances)?
                .into_iter()
                .map(Prediction::Mixture)
                .collect()),
        }
    }

    /// Backbone features after the optional graph step.
    pub fn features(&self) -> &Array2<f64> {
        &self.z
    }
}
