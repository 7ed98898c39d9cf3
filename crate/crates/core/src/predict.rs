//! Next-event prediction by numerical integration of the conditional
//! intensity after the last observed event.
//!
//! With total rate `λ(t) = Σ_k λ_k(t)` and `Λ(t) = ∫_{t_n}^{t} λ`, the next
//! event time has density `f(t) = λ(t) e^{−Λ(t)}`. The expected time and the
//! marginal type probabilities `∫ λ_k(t)/λ(t) f(t) dt` are evaluated on a
//! uniform grid with right Riemann or trapezoid weights.

use serde::{Deserialize, Serialize};

use crate::data::{Event, EventSequence};
use crate::hawkes::{true_intensity, HawkesSpec};
use crate::model::{HeadState, Vntpp};

pub const DEFAULT_POINTS: usize = 1000;
pub const LOW_MASS: f64 = 0.99;
const TARGET_MASS: f64 = 0.999;
const MAX_EXTENSIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    RightRiemann,
    Trapezoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_points: usize,
    pub scheme: Scheme,
}

impl PredictionGrid {
    pub fn new(t_start: f64, t_end: f64, n_points: usize, scheme: Scheme) -> Self {
        assert!(t_end > t_start, "grid end must exceed its start");
        assert!(n_points >= 2, "grid needs at least two points");
        Self {
            t_start,
            t_end,
            n_points,
            scheme,
        }
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / (self.n_points - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        if j == self.n_points - 1 {
            self.t_end
        } else {
            self.t_start + j as f64 * self.step()
        }
    }

    /// Quadrature weight of grid point `j`.
    pub fn weight(&self, j: usize) -> f64 {
        let h = self.step();
        match self.scheme {
            Scheme::RightRiemann => {
                if j == 0 {
                    0.0
                } else {
                    h
                }
            }
            Scheme::Trapezoid => {
                if j == 0 || j == self.n_points - 1 {
                    0.5 * h
                } else {
                    h
                }
            }
        }
    }

    /// Same spacing, twice the span.
    fn doubled(&self) -> Self {
        Self {
            t_end: self.t_start + 2.0 * (self.t_end - self.t_start),
            n_points: 2 * self.n_points - 1,
            ..*self
        }
    }
}

/// Conditional intensity after the last event of a fixed history.
pub trait ConditionalIntensity {
    fn num_types(&self) -> usize;
    /// Time of the last observed event (0 for an empty history).
    fn t_last(&self) -> f64;
    /// Per-type rates at `t ≥ t_last`.
    fn rates(&self, t: f64, out: &mut [f64]);
}

/// A learned model's intensity after a given history.
#[derive(Debug, Clone)]
pub struct NeuralIntensity {
    pub head: HeadState,
    pub t_last: f64,
}

impl ConditionalIntensity for NeuralIntensity {
    fn num_types(&self) -> usize {
        self.head.lin.len()
    }

    fn t_last(&self) -> f64 {
        self.t_last
    }

    fn rates(&self, t: f64, out: &mut [f64]) {
        self.head.rates(t - self.t_last, out)
    }
}

/// A Hawkes process' intensity after a given history.
#[derive(Debug, Clone)]
pub struct HawkesIntensity<'a> {
    pub spec: &'a HawkesSpec,
    pub history: &'a [Event],
}

impl ConditionalIntensity for HawkesIntensity<'_> {
    fn num_types(&self) -> usize {
        self.spec.num_types
    }

    fn t_last(&self) -> f64 {
        self.history.last().map_or(0.0, |e| e.t)
    }

    fn rates(&self, t: f64, out: &mut [f64]) {
        let lam = true_intensity(self.spec, self.history, t).expect("t after history");
        out.copy_from_slice(&lam);
    }
}

/// Constant per-type rates.
#[derive(Debug, Clone)]
pub struct ConstantIntensity {
    pub rates: Vec<f64>,
    pub t_last: f64,
}

impl ConditionalIntensity for ConstantIntensity {
    fn num_types(&self) -> usize {
        self.rates.len()
    }

    fn t_last(&self) -> f64 {
        self.t_last
    }

    fn rates(&self, _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.rates)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub expected_time: f64,
    /// Marginal next-type probabilities, normalized to sum to one.
    pub type_probs: Vec<f64>,
    pub predicted_type: usize,
    /// Quadrature mass of the time density on the grid.
    pub pdf_mass: f64,
    /// `1 − e^{−Λ(t_end)}`: probability that the next event falls on the grid.
    pub captured: f64,
    pub grid: PredictionGrid,
}

impl PredictionResult {
    pub fn low_mass(&self) -> bool {
        self.pdf_mass < LOW_MASS
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Grid evaluation of `λ_k`, `λ`, `Λ` and `f`.
#[derive(Debug, Clone)]
pub struct GridEval {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    /// `rates[j * K + k]`
    pub rates: Vec<f64>,
    pub total: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub pdf: Vec<f64>,
}

pub fn evaluate_grid(model: &dyn ConditionalIntensity, grid: &PredictionGrid) -> GridEval {
    let k = model.num_types();
    let n = grid.n_points;
    let times: Vec<f64> = (0..n).map(|j| grid.point(j)).collect();
    let weights: Vec<f64> = (0..n).map(|j| grid.weight(j)).collect();
    let mut rates = vec![0.0; n * k];
    for (j, &t) in times.iter().enumerate() {
        model.rates(t, &mut rates[j * k..(j + 1) * k]);
    }
    let total: Vec<f64> = rates.chunks(k).map(|r| r.iter().sum()).collect();
    let h = grid.step();
    let mut cumulative = vec![0.0; n];
    for j in 1..n {
        let inc = match grid.scheme {
            Scheme::RightRiemann => h * total[j],
            Scheme::Trapezoid => 0.5 * h * (total[j - 1] + total[j]),
        };
        cumulative[j] = cumulative[j - 1] + inc;
    }
    let pdf = total
        .iter()
        .zip(&cumulative)
        .map(|(l, c)| l * (-c).exp())
        .collect();
    GridEval {
        times,
        weights,
        rates,
        total,
        cumulative,
        pdf,
    }
}

/// `f(t)` at the grid points.
pub fn time_pdf(model: &dyn ConditionalIntensity, grid: &PredictionGrid) -> Vec<f64> {
    evaluate_grid(model, grid).pdf
}

fn summarize(k: usize, g: &GridEval, grid: &PredictionGrid) -> PredictionResult {
    let t0 = grid.t_start;
    let captured = 1.0 - (-g.cumulative[g.cumulative.len() - 1]).exp();
    let mut pdf_mass = 0.0;
    let mut offset = 0.0;
    let mut probs = vec![0.0; k];
    for j in 0..g.times.len() {
        let wf = g.weights[j] * g.pdf[j];
        pdf_mass += wf;
        offset += wf * (g.times[j] - t0);
        if g.total[j] > 0.0 {
            for (kk, p) in probs.iter_mut().enumerate() {
                *p += wf * g.rates[j * k + kk] / g.total[j];
            }
        }
    }
    let s: f64 = probs.iter().sum();
    if s > 0.0 {
        probs.iter_mut().for_each(|p| *p /= s);
    } else {
        probs.iter_mut().for_each(|p| *p = 1.0 / k as f64);
    }
    let norm = if captured > 0.0 { captured } else { 1.0 };
    PredictionResult {
        expected_time: t0 + offset / norm,
        predicted_type: argmax(&probs),
        type_probs: probs,
        pdf_mass,
        captured,
        grid: *grid,
    }
}

/// Expected next time, renormalized by the captured probability.
pub fn expected_time(model: &dyn ConditionalIntensity, grid: &PredictionGrid) -> f64 {
    predict_on_grid(model, grid).expected_time
}

/// Marginal next-type distribution.
pub fn type_marginal(model: &dyn ConditionalIntensity, grid: &PredictionGrid) -> Vec<f64> {
    predict_on_grid(model, grid).type_probs
}

/// All next-event quantities on a fixed grid.
pub fn predict_on_grid(model: &dyn ConditionalIntensity, grid: &PredictionGrid) -> PredictionResult {
    let g = evaluate_grid(model, grid);
    let r = summarize(model.num_types(), &g, grid);
    if r.low_mass() {
        log::warn!(
            "captured probability mass {:.4} below {LOW_MASS}; grid [{}, {}] too short",
            r.pdf_mass,
            grid.t_start,
            grid.t_end
        );
    }
    r
}

/// Predicts on `[t_last, t_last + 10·mean_gap]`, doubling the span (at the
/// same spacing) while less than 99.9% of the next-event probability is
/// captured, at most four times.
pub fn predict_next(
    model: &dyn ConditionalIntensity,
    mean_gap: f64,
    n_points: usize,
    scheme: Scheme,
) -> PredictionResult {
    let t0 = model.t_last();
    let mut grid = PredictionGrid::new(t0, t0 + 10.0 * mean_gap, n_points, scheme);
    let mut g = evaluate_grid(model, &grid);
    for _ in 0..MAX_EXTENSIONS {
        let captured = 1.0 - (-g.cumulative[g.cumulative.len() - 1]).exp();
        if captured >= TARGET_MASS {
            break;
        }
        grid = grid.doubled();
        g = evaluate_grid(model, &grid);
    }
    let r = summarize(model.num_types(), &g, &grid);
    if r.low_mass() {
        log::warn!("captured probability mass {:.4} below {LOW_MASS}", r.pdf_mass);
    }
    r
}

/// `λ_k(t)/λ(t)` at a given next time: the type distribution conditional on
/// the time. Diagnostic only; prediction uses the marginal.
pub fn conditional_type_probs(model: &dyn ConditionalIntensity, t: f64) -> Vec<f64> {
    let mut r = vec![0.0; model.num_types()];
    model.rates(t, &mut r);
    let s: f64 = r.iter().sum();
    r.iter_mut().for_each(|x| *x /= s);
    r
}

/// Prediction for one held-out event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionPrediction {
    pub seq_id: usize,
    pub pos: usize,
    pub t_true: f64,
    pub t_hat: f64,
    pub k_true: usize,
    pub k_hat: usize,
    pub type_probs: Vec<f64>,
    pub pdf_mass: f64,
    /// Time of the last observed event.
    pub t_last: f64,
}

fn position_prediction(
    seq_id: usize,
    seq: &EventSequence,
    pos: usize,
    r: PredictionResult,
) -> PositionPrediction {
    let e = seq.events()[pos];
    PositionPrediction {
        seq_id,
        pos,
        t_true: e.t,
        t_hat: r.expected_time,
        k_true: e.k,
        k_hat: r.predicted_type,
        type_probs: r.type_probs,
        pdf_mass: r.pdf_mass,
        t_last: seq.events()[pos - 1].t,
    }
}

/// Predictions for events `1..L` of every sequence (each with a nonempty
/// history) from a trained model in evaluation mode.
pub fn predict_sequences(
    model: &Vntpp,
    seqs: &[&EventSequence],
    mean_gap: f64,
    n_points: usize,
    scheme: Scheme,
) -> Result<Vec<PositionPrediction>, tpp_autodiff::AutodiffError> {
    let states = model.history_states(seqs)?;
    let mut out = Vec::new();
    for (sid, (seq, st)) in seqs.iter().zip(states).enumerate() {
        for pos in 1..seq.len() {
            let m = NeuralIntensity {
                head: st[pos].clone(),
                t_last: seq.events()[pos - 1].t,
            };
            let r = predict_next(&m, mean_gap, n_points, scheme);
            out.push(position_prediction(sid, seq, pos, r));
        }
    }
    Ok(out)
}

/// The same predictions from a Hawkes process.
pub fn predict_sequences_hawkes(
    spec: &HawkesSpec,
    seqs: &[&EventSequence],
    mean_gap: f64,
    n_points: usize,
    scheme: Scheme,
) -> Vec<PositionPrediction> {
    let mut out = Vec::new();
    for (sid, seq) in seqs.iter().enumerate() {
        for pos in 1..seq.len() {
            let m = HawkesIntensity {
                spec,
                history: seq.prefix(pos),
            };
            let r = predict_next(&m, mean_gap, n_points, scheme);
            out.push(position_prediction(sid, seq, pos, r));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights() {
        let g = PredictionGrid::new(0.0, 1.0, 5, Scheme::RightRiemann);
        let w: Vec<f64> = (0..5).map(|j| g.weight(j)).collect();
        assert_eq!(w, vec![0.0, 0.25, 0.25, 0.25, 0.25]);
        let g = PredictionGrid::new(0.0, 1.0, 5, Scheme::Trapezoid);
        let w: Vec<f64> = (0..5).map(|j| g.weight(j)).collect();
        assert_eq!(w, vec![0.125, 0.25, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.2]), 1);
    }

    #[test]
    fn doubling_keeps_spacing() {
        let g = PredictionGrid::new(1.0, 3.0, 5, Scheme::Trapezoid);
        let d = g.doubled();
        assert_eq!(d.t_end, 5.0);
        assert_eq!(d.step(), g.step());
    }
}
