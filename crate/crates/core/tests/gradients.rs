//! Analytic gradients against central finite differences.

use mixcast::gmm::GaussianMixture;
use mixcast::nn::{Graph, Model, ModelConfig, Variant};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_mixture(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = rng.random_range(1..=5);
    let logits = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let means = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let log_vars = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
    (logits, means, log_vars)
}

fn nll_of(logits: &[f64], means: &[f64], log_vars: &[f64], y: f64) -> f64 {
    GaussianMixture::from_head_outputs(logits, means, log_vars)
        .unwrap()
        .nll(y)
}

#[test]
fn mixture_nll_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (logits, means, log_vars) = random_mixture(&mut rng);
        let y = rng.random_range(-4.0..4.0);
        let m = GaussianMixture::from_head_outputs(&logits, &means, &log_vars).unwrap();
        let g = m.nll_gradients(y);
        for (which, params, analytic) in [
            (0, &logits, &g.logits),
            (1, &means, &g.means),
            (2, &log_vars, &g.log_variances),
        ] {
            for i in 0..params.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[i] += h;
                minus[i] -= h;
                let eval = |p: &Vec<f64>| match which {
                    0 => nll_of(p, &means, &log_vars, y),
                    1 => nll_of(&logits, p, &log_vars, y),
                    _ => nll_of(&logits, &means, p, y),
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let e = rel_err(analytic[i], numeric);
                worst = worst.max(e);
                assert!(e < 1e-4, "param {which}/{i}: {} vs {numeric}", analytic[i]);
            }
        }
    }
    println!("worst relative error {worst:.3e}");
}

fn randomized_model(variant: Variant, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(variant, 4, 3, 2);
    cfg.backbone.hidden = 6;
    cfg.backbone.features = 5;
    cfg.head.projection_dim = 4;
    let mut model = Model::new(cfg, Some(Graph::chain(2)), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, l) in model.layers_mut() {
        l.weight.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    model
}

fn check_model(variant: Variant, seed: u64, probes: usize) -> f64 {
    let model = randomized_model(variant, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Array3::from_shape_simple_fn((3, 2, 4), || rng.random_range(-1.5..1.5));
    let y = Array3::from_shape_simple_fn((3, 2, 3), || rng.random_range(-2.0..2.0));
    let (_, grad) = model.loss_and_grad(&x, &y).unwrap();

    let layer_count = model.layers().len();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let li = rng.random_range(0..layer_count);
        let use_bias = rng.random_bool(0.3);
        let (analytic, len) = {
            let (_, g) = &grad.layers()[li];
            let len = if use_bias { g.bias.len() } else { g.weight.len() };
            let idx = rng.random_range(0..len);
            let a = if use_bias {
                g.bias[idx]
            } else {
                g.weight.as_slice().unwrap()[idx]
            };
            (a, idx)
        };
        let idx = len;
        let eval = |delta: f64| {
            let mut m = model.clone();
            {
                let mut layers = m.layers_mut();
                let l = &mut layers[li].1;
                if use_bias {
                    l.bias[idx] += delta;
                } else {
                    l.weight.as_slice_mut().unwrap()[idx] += delta;
                }
            }
            m.loss(&x, &y).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        assert!(
            e < 1e-3,
            "{variant} layer {} {} {idx}: analytic {analytic} numeric {numeric}",
            model.layers()[li].0,
            if use_bias { "bias" } else { "weight" }
        );
    }
    worst
}

#[test]
fn mixture_model_backward_matches_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..4 {
        worst = worst.max(check_model(Variant::Gmm, seed, 30));
    }
    println!("gmm worst relative error {worst:.3e}");
}

#[test]
fn norm_model_backward_matches_finite_differences() {
    let worst = check_model(Variant::Norm, 7, 30);
    println!("norm worst relative error {worst:.3e}");
}

#[test]
fn point_model_backward_matches_finite_differences() {
    let worst = check_model(Variant::Det, 9, 30);
    println!("det worst relative error {worst:.3e}");
}
