//! Randomized invariants of mixtures, intervals and scores.

use mixcast::gmm::GaussianMixture;
use mixcast::interval::{DensityGrid, HighDensityRanking};
use mixcast::metrics::{crps_mixture_auto, default_levels, evaluate, EvalConfig, Prediction, ScoringBatch};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mixture(k_max: usize, mean_abs: f64, var: (f64, f64)) -> impl Strategy<Value = GaussianMixture> {
    (1..=k_max).prop_flat_map(move |k| {
        (
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(-mean_abs..mean_abs, k),
            prop::collection::vec(var.0..var.1, k),
        )
            .prop_map(|(w, m, v)| {
                let s: f64 = w.iter().sum();
                GaussianMixture::new(w.iter().map(|x| x / s).collect(), m, v).unwrap()
            })
    })
}

fn trapezoid(f: &[f64], dx: f64) -> f64 {
    let inner: f64 = f[1..f.len() - 1].iter().sum();
    dx * (inner + 0.5 * (f[0] + f[f.len() - 1]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_integrates_to_one(m in mixture(5, 10.0, (1e-2, 10.0))) {
        let pad = 8.0 * m.max_std();
        let (lo, hi) = (m.min_mean() - pad, m.max_mean() + pad);
        let n = 10_000;
        let dx = (hi - lo) / (n - 1) as f64;
        let f: Vec<f64> = (0..n).map(|i| m.log_density(lo + i as f64 * dx).exp()).collect();
        prop_assert!((trapezoid(&f, dx) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cdf_derivative_is_density(m in mixture(5, 5.0, (0.05, 4.0)), x in -6.0f64..6.0) {
        let h = 1e-5;
        let numeric = (m.cdf(x + h) - m.cdf(x - h)) / (2.0 * h);
        prop_assert!((numeric - m.density(x)).abs() < 1e-4);
    }

    #[test]
    fn single_component_matches_closed_forms(mu in -10.0f64..10.0, var in 1e-2f64..10.0, y in -20.0f64..20.0) {
        let m = GaussianMixture::normal(mu, var).unwrap();
        let z = (y - mu) / var.sqrt();
        let log_pdf = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        prop_assert!((m.log_density(y) - log_pdf).abs() <= 1e-12 * (1.0 + log_pdf.abs()));
        let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
        prop_assert!((m.cdf(y) - cdf).abs() <= 1e-12);
        prop_assert_eq!(m.mean(), mu);
    }

    #[test]
    fn nll_is_finite_far_away(m in mixture(5, 10.0, (1e-2, 10.0)), sign in prop::bool::ANY) {
        let far = m.max_mean().abs().max(m.min_mean().abs()) + 1e6 * m.max_std();
        let y = if sign { far } else { -far };
        prop_assert!(m.nll(y).is_finite());
    }

    #[test]
    fn intervals_nest_and_widen(m in mixture(5, 4.0, (0.05, 2.0))) {
        let grid = DensityGrid::from_mixture(&m, -15.0, 15.0, 500).unwrap();
        let ranking = HighDensityRanking::new(&grid).unwrap();
        let levels = default_levels();
        let mut prev_sel: Option<Vec<bool>> = None;
        let mut prev_width = 0.0;
        for &c in &levels {
            let sel = ranking.select(c).unwrap();
            if let Some(p) = &prev_sel {
                prop_assert!(p.iter().zip(&sel).all(|(a, b)| !a || *b));
            }
            let width = ranking.intervals(c).unwrap().width();
            prop_assert!(width >= prev_width);
            let mass = ranking.selected_mass(c).unwrap();
            prop_assert!(mass >= c && mass <= c + ranking.max_cell_mass() + 1e-12);
            prev_sel = Some(sel);
            prev_width = width;
        }
    }

    #[test]
    fn separated_components_bound_the_piece_count(
        k in 1usize..=4,
        sd in 0.1f64..0.4,
        start in -8.0f64..-6.0,
    ) {
        // Means spaced 6.5 σ_max apart.
        let means: Vec<f64> = (0..k).map(|i| start + i as f64 * 6.5 * sd).collect();
        let m = GaussianMixture::new(vec![1.0 / k as f64; k], means, vec![sd * sd; k]).unwrap();
        let grid = DensityGrid::from_mixture(&m, -10.0, 10.0, 2001).unwrap();
        let ranking = HighDensityRanking::new(&grid).unwrap();
        for c in default_levels() {
            prop_assert!(ranking.intervals(c).unwrap().len() <= k);
        }
    }

    #[test]
    fn selection_is_the_smallest_reaching_set(
        density in prop::collection::vec(0.0f64..1.0, 4..=14),
        c in 0.05f64..0.95,
    ) {
        prop_assume!(density.iter().sum::<f64>() > 0.1);
        let grid = DensityGrid::new(0.0, 1.0, density.clone()).unwrap();
        let ranking = HighDensityRanking::new(&grid).unwrap();
        let sel = ranking.select(c).unwrap();
        let total: f64 = density.iter().sum();
        let chosen: f64 = density.iter().zip(&sel).filter(|(_, &s)| s).map(|(d, _)| d).sum();
        let size = sel.iter().filter(|&&s| s).count();
        prop_assert!(chosen / total >= c - 1e-12);
        // No subset with fewer cells reaches c.
        let n = density.len();
        for bits in 0u32..(1 << n) {
            if (bits.count_ones() as usize) < size {
                let mass: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| density[i]).sum();
                prop_assert!(mass / total < c + 1e-12);
            }
        }
    }
}

#[test]
fn greedy_selection_on_fifty_cells() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..200 {
        let density: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let total: f64 = density.iter().sum();
        let c = rng.random_range(0.1..0.95);
        let grid = DensityGrid::new(0.0, 1.0, density.clone()).unwrap();
        let sel = HighDensityRanking::new(&grid).unwrap().select(c).unwrap();
        let size = sel.iter().filter(|&&s| s).count();
        // The heaviest size-1 cells are the best any smaller set can do.
        let mut sorted = density.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let best_smaller: f64 = sorted[..size - 1].iter().sum();
        assert!(best_smaller / total < c);
        let chosen: f64 = density.iter().zip(&sel).filter(|(_, &s)| s).map(|(d, _)| d).sum();
        assert!(chosen / total >= c - 1e-12);
    }
}

#[test]
fn crps_prefers_the_true_distribution() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    // Coarser integration keeps 10^6 scores affordable; the same grid rule
    // applies to both forecasts.
    let points = 401;
    for pair in 0..5 {
        let truth = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![rng.random_range(-3.0..-1.0), rng.random_range(1.0..3.0)],
            vec![rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)],
        )
        .unwrap();
        let alt = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![truth.means()[0] + rng.random_range(-1.0..1.0), truth.means()[1] + 0.5],
            vec![1.0, 0.2],
        )
        .unwrap();
        let diffs: Vec<f64> = (0..n)
            .map(|_| {
                let y = truth.sample_one(&mut rng);
                crps_mixture_auto(&alt, y, points) - crps_mixture_auto(&truth, y, points)
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean > 3.0 * se, "pair {pair}: mean diff {mean} vs se {se}");
    }
}

#[test]
fn report_summaries_are_recomputable() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 400;
    let preds: Vec<Prediction> = (0..n)
        .map(|_| {
            Prediction::Mixture(
                GaussianMixture::new(
                    vec![0.3, 0.7],
                    vec![rng.random_range(-3.0..0.0), rng.random_range(0.0..3.0)],
                    vec![rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)],
                )
                .unwrap(),
            )
        })
        .collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let cfg = EvalConfig::with_interval_range(-10.0, 10.0);
    let report = evaluate(
        ScoringBatch {
            predictions: &preds,
            targets: &targets,
            horizon: 4,
        },
        &cfg,
    )
    .unwrap();

    let mcce = report
        .calibration_curve
        .iter()
        .map(|p| (p.coverage - p.level).abs())
        .sum::<f64>()
        / report.calibration_curve.len() as f64;
    assert!((report.mcce.unwrap() - mcce).abs() <= 1e-12);

    let mut width_sum = 0.0;
    for p in &preds {
        let Prediction::Mixture(m) = p else { unreachable!() };
        let grid = DensityGrid::from_mixture(m, -10.0, 10.0, 500).unwrap();
        let ranking = HighDensityRanking::new(&grid).unwrap();
        let per_element: f64 = cfg
            .levels
            .iter()
            .map(|&c| ranking.intervals(c).unwrap().width())
            .sum::<f64>()
            / cfg.levels.len() as f64;
        width_sum += per_element;
    }
    assert!((report.maw.unwrap() - width_sum / n as f64).abs() <= 1e-9);
}
