use std::path::PathBuf;

use tpp_core::data::{load_dataset, save_dataset, Event, EventSequence};
use tpp_core::eval::{chain_gaps, ks_exponential};
use tpp_core::hawkes::*;
use tpp_core::rng::stream_rng;

fn spec_file(name: &str) -> HawkesSpec {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("specs").join(name);
    HawkesSpec::load(&p).unwrap()
}

fn poisson(rates: &[f64]) -> HawkesSpec {
    let k = rates.len();
    HawkesSpec {
        num_types: k,
        mu: rates.to_vec(),
        a: vec![vec![0.0; k]; k],
        kernel: Kernel::Exponential { beta: 1.0 },
        horizon: None,
    }
}

#[test]
fn poisson_counts_match_mean() {
    let (lambda, horizon) = (3.0, 20.0);
    let spec = poisson(&[lambda]);
    let n = 200;
    let total: usize = (0..n)
        .map(|s| {
            let mut rng = stream_rng(11, s);
            simulate_events(&spec, horizon, &mut rng, DEFAULT_MAX_EVENTS)
                .unwrap()
                .len()
        })
        .sum();
    let mean = total as f64 / n as f64;
    let expect = lambda * horizon;
    assert!((mean - expect).abs() < 3.0 * (expect / n as f64).sqrt(), "mean {mean}");
}

#[test]
fn poisson_gaps_are_exponential() {
    let spec = poisson(&[1.5, 0.5]);
    let mut rng = stream_rng(5, 0);
    let ev = simulate_events(&spec, 4000.0, &mut rng, DEFAULT_MAX_EVENTS).unwrap();
    assert!(ev.len() > 5000);
    let mut prev = 0.0;
    let gaps: Vec<f64> = ev
        .iter()
        .map(|e| {
            let g = (e.t - prev) * 2.0;
            prev = e.t;
            g
        })
        .collect();
    let r = ks_exponential(&gaps);
    assert!(r.p > 0.01, "{r:?}");
}

#[test]
fn simulation_is_deterministic() {
    let spec = spec_file("synthetic1.json");
    let a = simulate(&spec, 50.0, 9).unwrap();
    let b = simulate(&spec, 50.0, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.events().iter().all(|e| e.t > 0.0 && e.t <= 50.0));
    let c = generate_dataset(&spec, 20, 50.0, 3, "x").unwrap();
    let d = generate_dataset(&spec, 20, 50.0, 3, "x").unwrap();
    assert_eq!(c.sequences, d.sequences);
}

#[test]
fn exponential_time_rescaling_passes() {
    let spec = spec_file("synthetic2.json");
    let data = generate_dataset(&spec, 120, spec.horizon.unwrap(), 21, "s2").unwrap();
    let parts: Vec<(Vec<f64>, f64)> = data
        .sequences
        .iter()
        .map(|s| (rescaled_gaps(&spec, s).unwrap(), rescaled_tail(&spec, s).unwrap()))
        .collect();
    let gaps = chain_gaps(parts);
    assert!(gaps.len() >= 5000, "{}", gaps.len());
    let r = ks_exponential(&gaps);
    assert!(r.p > 0.01, "{r:?}");
}

#[test]
fn gaussian_time_rescaling_passes() {
    let spec = HawkesSpec {
        num_types: 2,
        mu: vec![0.4, 0.3],
        a: vec![vec![0.3, 0.2], vec![0.1, 0.4]],
        kernel: Kernel::Gaussian {
            center: 1.5,
            width: 0.4,
        },
        horizon: None,
    };
    assert!(spec.validate().unwrap().is_none());
    let data = generate_dataset(&spec, 100, 60.0, 4, "g").unwrap();
    let parts: Vec<(Vec<f64>, f64)> = data
        .sequences
        .iter()
        .map(|s| (rescaled_gaps(&spec, s).unwrap(), rescaled_tail(&spec, s).unwrap()))
        .collect();
    let gaps = chain_gaps(parts);
    assert!(gaps.len() >= 5000, "{}", gaps.len());
    let r = ks_exponential(&gaps);
    assert!(r.p > 0.01, "{r:?}");
}

#[test]
fn committed_specs_hit_calibrated_lengths() {
    for (name, target) in [("synthetic1.json", 58.47), ("synthetic2.json", 65.71)] {
        let spec = spec_file(name);
        assert!(spec.validate().unwrap().is_none());
        let data = generate_dataset(&spec, 1000, spec.horizon.unwrap(), 2024, name).unwrap();
        let m = data.mean_length();
        assert!((m - target).abs() < 0.1 * target, "{name}: mean length {m}");
    }
}

#[test]
fn synthetic1_sized_dataset_round_trips() {
    let spec = spec_file("synthetic1.json");
    let data = generate_dataset(&spec, 9960, spec.horizon.unwrap(), 1, "synthetic1").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.jsonl");
    save_dataset(&path, &data).unwrap();
    let back = load_dataset(&path, Some(2)).unwrap();
    assert_eq!(back.len(), 9960);
    assert_eq!(back.sequences, data.sequences);
}

#[test]
fn trace_jumps_up_at_events() {
    let spec = spec_file("synthetic1.json");
    let seq = simulate(&spec, 30.0, 2).unwrap();
    for (i, e) in seq.events().iter().enumerate() {
        let before = true_intensity(&spec, &seq.events()[..i], e.t).unwrap();
        let after = true_intensity(&spec, &seq.events()[..=i], e.t).unwrap();
        for k in 0..2 {
            assert!(after[k] >= before[k]);
            if spec.a[k][e.k] > 0.0 {
                assert!(after[k] > before[k]);
            }
        }
    }
    let tr = intensity_trace(&spec, &seq, 400);
    assert!(tr.grid.windows(2).all(|w| w[1] > w[0]));
    for (k, row) in tr.values.iter().enumerate() {
        assert!(row.iter().all(|&v| v >= spec.mu[k]));
    }
}

#[test]
fn empty_history_trace_is_base_rate() {
    let spec = spec_file("synthetic2.json");
    let seq = EventSequence::new(vec![Event::new(0, 10.0)], 10.0).unwrap();
    let tr = intensity_trace(&spec, &seq, 50);
    for j in 0..tr.grid.len() - 1 {
        for k in 0..3 {
            assert_eq!(tr.values[k][j], spec.mu[k]);
        }
    }
}

#[test]
fn exponential_intensity_decays_between_events() {
    let spec = spec_file("synthetic2.json");
    let seq = simulate(&spec, 40.0, 8).unwrap();
    let ev = seq.events();
    for i in 0..ev.len() - 1 {
        let h = &ev[..=i];
        let (a, b) = (ev[i].t, ev[i + 1].t);
        let mut last = f64::INFINITY;
        for j in 0..=10 {
            let t = a + (b - a) * j as f64 / 10.0;
            let v: f64 = true_intensity(&spec, h, t).unwrap().iter().sum();
            assert!(v <= last + 1e-12);
            last = v;
        }
    }
}

#[test]
fn trapezoid_reference_matches_closed_form() {
    let spec = spec_file("synthetic1.json");
    for seed in 0..10 {
        let seq = simulate(&spec, 55.0, seed).unwrap();
        let ev = seq.events();
        let (t0, t1) = (ev[0].t, ev[ev.len() - 1].t);
        let exact = compensator_closed_form(&spec, ev, t0, t1).unwrap();
        let approx = trapezoid_compensator(&spec, ev, t0, t1, 200);
        assert!((approx - exact).abs() < 1e-3 * exact, "{approx} vs {exact}");
    }
}

#[test]
fn gaussian_compensator_matches_quadrature() {
    let spec = HawkesSpec {
        num_types: 1,
        mu: vec![0.5],
        a: vec![vec![0.6]],
        kernel: Kernel::Gaussian {
            center: 1.0,
            width: 0.3,
        },
        horizon: None,
    };
    let seq = simulate(&spec, 30.0, 1).unwrap();
    let ev = seq.events();
    let exact = compensator(&spec, ev, 0.0, 30.0).unwrap();
    let approx = trapezoid_compensator(&spec, ev, 0.0, 30.0, 2000);
    assert!((approx - exact).abs() < 1e-4 * exact, "{approx} vs {exact}");
}

#[test]
fn log_likelihood_of_poisson() {
    let spec = poisson(&[2.0]);
    let seq = EventSequence::new(vec![Event::new(0, 1.0), Event::new(0, 2.0)], 3.0).unwrap();
    let ll = log_likelihood(&spec, &seq).unwrap();
    assert!((ll - (2.0 * 2f64.ln() - 6.0)).abs() < 1e-12);
}

#[test]
fn spec_json_schema() {
    let s: HawkesSpec = serde_json::from_str(
        r#"{"K":1,"mu":[0.5],"a":[[1.0]],"kernel":{"type":"exponential","beta":2.0}}"#,
    )
    .unwrap();
    assert_eq!(s.kernel, Kernel::Exponential { beta: 2.0 });
    let g: HawkesSpec = serde_json::from_str(
        r#"{"K":1,"mu":[0.5],"a":[[0.2]],"kernel":{"type":"gaussian","center":1.0,"width":0.5}}"#,
    )
    .unwrap();
    assert!(matches!(g.kernel, Kernel::Gaussian { .. }));
    assert!(serde_json::from_str::<HawkesSpec>(r#"{"K":1,"mu":[0.5],"a":[[1.0]]}"#).is_err());
}
