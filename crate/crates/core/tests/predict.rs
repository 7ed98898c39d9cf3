use tpp_core::data::{Event, EventSequence};
use tpp_core::hawkes::{HawkesSpec, Kernel};
use tpp_core::model::{HeadState, Variant};
use tpp_core::predict::*;

fn constant(rates: &[f64]) -> ConstantIntensity {
    ConstantIntensity {
        rates: rates.to_vec(),
        t_last: 3.0,
    }
}

#[test]
fn constant_rate_expectations() {
    for (lam, expect) in [(2.0, 0.5), (1.0, 1.0)] {
        let m = constant(&[lam]);
        let r = predict_next(&m, 1.0, DEFAULT_POINTS, Scheme::RightRiemann);
        let dt = r.expected_time - 3.0;
        assert!((dt - expect).abs() < 0.01 * expect, "λ={lam}: {dt}");
        assert!(r.captured >= 0.999);
        assert!(!r.low_mass());
    }
}

#[test]
fn constant_rates_give_proportional_types() {
    let m = constant(&[2.0, 1.0]);
    let r = predict_next(&m, 1.0, DEFAULT_POINTS, Scheme::Trapezoid);
    assert!((r.type_probs[0] - 2.0 / 3.0).abs() < 1e-9);
    assert!((r.type_probs[1] - 1.0 / 3.0).abs() < 1e-9);
    assert_eq!(r.predicted_type, 0);
    let c = conditional_type_probs(&m, 4.0);
    assert!((c[0] - 2.0 / 3.0).abs() < 1e-12);
}

fn hawkes() -> HawkesSpec {
    HawkesSpec {
        num_types: 2,
        mu: vec![0.3, 0.2],
        a: vec![vec![0.3, 0.4], vec![0.2, 0.2]],
        kernel: Kernel::Exponential { beta: 1.0 },
        horizon: None,
    }
}

fn history() -> Vec<Event> {
    vec![Event::new(0, 0.4), Event::new(1, 0.9), Event::new(0, 2.2)]
}

#[test]
fn schemes_agree() {
    let spec = hawkes();
    let h = history();
    let m = HawkesIntensity { spec: &spec, history: &h };
    let a = predict_next(&m, 1.5, DEFAULT_POINTS, Scheme::RightRiemann);
    let b = predict_next(&m, 1.5, DEFAULT_POINTS, Scheme::Trapezoid);
    let (da, db) = (a.expected_time - 2.2, b.expected_time - 2.2);
    assert!((da - db).abs() < 0.005 * db, "{da} vs {db}");
    for k in 0..2 {
        assert!((a.type_probs[k] - b.type_probs[k]).abs() < 0.005);
    }
    assert!(a.expected_time > 2.2);
}

#[test]
fn refinement_converges() {
    let spec = hawkes();
    let h = history();
    let m = HawkesIntensity { spec: &spec, history: &h };
    let est: Vec<f64> = [250, 500, 1000, 2000, 4000]
        .iter()
        .map(|&n| predict_on_grid(&m, &PredictionGrid::new(2.2, 40.0, n, Scheme::Trapezoid)).expected_time)
        .collect();
    let diffs: Vec<f64> = est.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    for d in diffs.windows(2) {
        assert!(d[1] <= d[0] * 0.6, "{diffs:?}");
    }
    assert!(diffs[diffs.len() - 1] < 1e-4, "{diffs:?}");
}

#[test]
fn short_grid_is_extended() {
    let m = constant(&[0.05]);
    // Mean gap 1 gives an initial span of 10, far too short for rate 0.05.
    let r = predict_next(&m, 1.0, 200, Scheme::Trapezoid);
    assert!(r.grid.t_end - r.grid.t_start > 10.0);
    assert!((r.grid.step() - 10.0 / 199.0).abs() < 1e-12);
    let capped = predict_next(&constant(&[0.001]), 1.0, 200, Scheme::Trapezoid);
    assert!((capped.grid.t_end - capped.grid.t_start - 160.0).abs() < 1e-9);
    assert!(capped.low_mass());
}

#[test]
fn pdf_integrates_to_captured_mass() {
    let spec = hawkes();
    let h = history();
    let m = HawkesIntensity { spec: &spec, history: &h };
    let grid = PredictionGrid::new(2.2, 30.0, 4001, Scheme::Trapezoid);
    let r = predict_on_grid(&m, &grid);
    assert!((r.pdf_mass - r.captured).abs() < 1e-5);
    let f = time_pdf(&m, &grid);
    assert!(f.iter().all(|&v| v >= 0.0));
}

#[test]
fn neural_head_predictions_after_last_event() {
    let head = HeadState {
        variant: Variant::Linear,
        lin: vec![0.5, -0.2, 1.0],
        alpha: vec![0.3; 3],
    };
    let m = NeuralIntensity { head, t_last: 5.0 };
    let r = predict_next(&m, 0.8, DEFAULT_POINTS, Scheme::RightRiemann);
    assert!(r.expected_time > 5.0);
    assert!((r.type_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(r.predicted_type, 2);
}

#[test]
fn hawkes_sequence_predictions_skip_first_event() {
    let spec = hawkes();
    let seq = EventSequence::new(history(), 3.0).unwrap();
    let preds = predict_sequences_hawkes(&spec, &[&seq], 1.0, 500, Scheme::Trapezoid);
    assert_eq!(preds.len(), 2);
    for p in &preds {
        assert!(p.t_hat > p.t_last);
        assert_eq!(p.t_true, seq.events()[p.pos].t);
    }
}
