use tpp_core::baselines::*;
use tpp_core::data::{split, Dataset};
use tpp_core::hawkes::{generate_dataset, HawkesSpec, Kernel};

fn truth() -> HawkesSpec {
    HawkesSpec {
        num_types: 2,
        mu: vec![0.4, 0.3],
        a: vec![vec![0.3, 0.2], vec![0.1, 0.4]],
        kernel: Kernel::Exponential { beta: 1.2 },
        horizon: None,
    }
}

#[test]
fn poisson_fit_matches_count_over_time() {
    let spec = HawkesSpec {
        a: vec![vec![0.0; 2]; 2],
        ..truth()
    };
    let data = generate_dataset(&spec, 100, 50.0, 1, "p").unwrap();
    let opts = FitOptions {
        zero_excitation: true,
        iterations: 2000,
        learning_rate: 0.05,
        ..FitOptions::default()
    };
    let fit = fit_hawkes(&data, KernelKind::Exponential, &opts).unwrap();
    let counts = data.type_counts();
    let total_time: f64 = data.sequences.iter().map(|s| s.horizon()).sum();
    for k in 0..2 {
        let mle = counts[k] as f64 / total_time;
        assert!((fit.spec.mu[k] - mle).abs() < 0.02 * mle, "{} vs {mle}", fit.spec.mu[k]);
    }
}

fn data(n: usize, seed: u64, horizon: f64) -> Dataset {
    generate_dataset(&truth(), n, horizon, seed, "h").unwrap()
}

#[test]
fn exponential_fit_recovers_parameters() {
    let d = data(300, 2, 60.0);
    let fit = fit_hawkes(&d, KernelKind::Exponential, &FitOptions::default()).unwrap();
    let t = truth();
    for k in 0..2 {
        assert!((fit.spec.mu[k] - t.mu[k]).abs() < 0.1, "mu {:?}", fit.spec.mu);
        for j in 0..2 {
            assert!((fit.spec.a[k][j] - t.a[k][j]).abs() < 0.1, "a {:?}", fit.spec.a);
        }
    }
    let Kernel::Exponential { beta } = fit.spec.kernel else { panic!() };
    assert!((beta - 1.2).abs() < 0.4, "beta {beta}");
    assert!(fit.fit_meta.train_loglik >= mean_loglik(&t, &d) - 1.0);

    // Restarting at the fit never makes it worse.
    let again = fit_hawkes(
        &d,
        KernelKind::Exponential,
        &FitOptions {
            init: Some(fit.spec.clone()),
            iterations: 50,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert!(again.fit_meta.train_loglik >= fit.fit_meta.train_loglik - 1e-9);
}

#[test]
fn exponential_beats_gaussian_on_exponential_data() {
    let d = data(200, 3, 30.0);
    let (tr, _, te) = split(&d, (0.6, 0.2, 0.2), 0).unwrap();
    let ek = fit_hawkes(&tr, KernelKind::Exponential, &FitOptions::default()).unwrap();
    let gk = fit_hawkes(&tr, KernelKind::Gaussian, &FitOptions::default()).unwrap();
    assert!(matches!(gk.spec.kernel, Kernel::Gaussian { .. }));
    let (le, lg) = (mean_loglik(&ek.spec, &te), mean_loglik(&gk.spec, &te));
    assert!(le >= lg, "EK {le} < GK {lg}");
}

#[test]
fn fixed_kernel_is_kept_and_fit_round_trips() {
    let d = data(40, 4, 60.0);
    let init = HawkesSpec {
        kernel: Kernel::Exponential { beta: 2.5 },
        ..truth()
    };
    let fit = fit_hawkes(
        &d,
        KernelKind::Exponential,
        &FitOptions {
            fit_kernel: false,
            init: Some(init),
            iterations: 100,
            ..FitOptions::default()
        },
    )
    .unwrap();
    let Kernel::Exponential { beta } = fit.spec.kernel else { panic!() };
    assert!((beta - 2.5).abs() < 1e-9);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fit.json");
    fit.save(&p).unwrap();
    let back = HawkesFit::load(&p).unwrap();
    assert_eq!(back, fit);
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(raw["K"], 2);
    assert!(raw["fit_meta"]["train_loglik"].is_f64());
}
