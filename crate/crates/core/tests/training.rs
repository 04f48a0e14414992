use mixcast::data::*;
use mixcast::gmm::GaussianMixture;
use mixcast::metrics::Prediction;
use mixcast::nn::{ModelConfig, Variant};
use mixcast::training::*;

/// Each step is congested with probability 0.3 independently of the past
/// (onset + clear = 1), so every target has the same two-mode law.
fn memoryless_spec() -> SyntheticSpec {
    SyntheticSpec {
        nodes: 6,
        sessions: 20,
        steps_per_session: 60,
        demand: DemandProfile::Flat,
        hold: 0.0,
        regimes: vec![
            NodeRegime {
                free_speed: 11.0,
                congested_speed: 2.0,
                p_onset: 0.3,
                p_clear: 0.7,
                noise: 0.5,
            };
            6
        ],
        ..SyntheticSpec::default()
    }
}

fn windows(d: &SeriesDataset, n: &Normalizer) -> (WindowSet, WindowSet) {
    (
        window(d, Part::Train, 10, 5, n).unwrap(),
        window(d, Part::Val, 10, 5, n).unwrap(),
    )
}

#[test]
fn fixed_seed_reproduces_the_run() {
    let d = generate(&SyntheticSpec {
        nodes: 5,
        sessions: 10,
        steps_per_session: 40,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let n = d.fit_normalizer().unwrap();
    let (tr, va) = windows(&d, &n);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || fit(ModelConfig::new(Variant::Gmm, tr.input_dim(), 5, 3), None, &tr, &va, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    assert_eq!(a.log.len(), 3);
}

#[test]
fn mixture_beats_the_prior() {
    let d = generate(&memoryless_spec()).unwrap();
    let n = d.fit_normalizer().unwrap();
    let (tr, va) = windows(&d, &n);
    let cfg = TrainConfig {
        epochs: 12,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = fit(ModelConfig::new(Variant::Gmm, tr.input_dim(), 5, 5), None, &tr, &va, &cfg).unwrap();
    let prior = GaussianMixture::new(vec![0.2; 5], vec![-2.0, -1.0, 0.0, 1.0, 2.0], vec![1.0; 5]).unwrap();
    let prior_nll = va.targets.iter().map(|&y| prior.nll(y)).sum::<f64>() / va.targets.len() as f64;
    assert!((out.initial_val_loss - prior_nll).abs() < 1e-9);
    let final_val = out.log.last().unwrap().val_loss;
    assert!(final_val < prior_nll, "{final_val} vs prior {prior_nll}");

    // Mass on the congested mode approaches its 0.3 frequency.
    let preds = out.best.predict(&va.inputs).unwrap();
    let low = n.transform(6.5);
    let mut congested = 0.0;
    for p in &preds {
        let Prediction::Mixture(m) = p else { panic!() };
        congested += m.cdf(low);
    }
    let share = congested / preds.len() as f64;
    assert!((share - 0.3).abs() < 0.05, "congested share {share}");
}

#[test]
fn point_model_learns_the_median() {
    let spec = memoryless_spec();
    let d = generate(&spec).unwrap();
    let n = d.fit_normalizer().unwrap();
    let (tr, va) = windows(&d, &n);
    let cfg = TrainConfig {
        epochs: 12,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = fit(ModelConfig::new(Variant::Det, tr.input_dim(), 5, 1), None, &tr, &va, &cfg).unwrap();
    // 0.7 Φ((m − 11)/0.5) + 0.3 Φ((m − 2)/0.5) = 0.5, solved by bisection.
    let law = GaussianMixture::new(vec![0.7, 0.3], vec![11.0, 2.0], vec![0.25, 0.25]).unwrap();
    let (mut lo, mut hi) = (2.0, 11.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if law.cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let median = 0.5 * (lo + hi);
    let preds = out.best.predict(&va.inputs).unwrap();
    let mean_pred = preds.iter().map(|p| n.inverse(p.point_estimate())).sum::<f64>() / preds.len() as f64;
    assert!((mean_pred - median).abs() < 0.25, "{mean_pred} vs median {median}");
    assert!((mean_pred - law.mean()).abs() > 1.5);
}

#[test]
fn variants_share_batch_order() {
    let d = generate(&SyntheticSpec {
        nodes: 4,
        sessions: 10,
        steps_per_session: 30,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let n = d.fit_normalizer().unwrap();
    let (tr, va) = windows(&d, &n);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let hashes: Vec<String> = [Variant::Det, Variant::Norm, Variant::Gmm]
        .into_iter()
        .map(|v| {
            fit(ModelConfig::new(v, tr.input_dim(), 5, 3), None, &tr, &va, &cfg)
                .unwrap()
                .batch_hash
        })
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn empty_training_set_is_rejected() {
    let d = generate(&SyntheticSpec {
        nodes: 2,
        sessions: 10,
        steps_per_session: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let n = d.fit_normalizer().unwrap();
    let (tr, va) = windows(&d, &n);
    let err = fit(ModelConfig::new(Variant::Gmm, 13, 5, 2), None, &tr, &va, &TrainConfig::default());
    assert!(matches!(err, Err(TrainError::NoData)));
}
