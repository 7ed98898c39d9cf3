//! Evaluation: next-type F1, time errors, intensity errors against a known
//! process, latent-space SVD with a linear probe, and time-rescaling
//! goodness of fit.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tpp_autodiff::{AdamConfig, AdamState, AutodiffError, ParamStore, Tape, Tensor};

use crate::data::EventSequence;
use crate::hawkes::{intensity_trace, rescaled_gaps, rescaled_tail, uniform_grid, HawkesError, HawkesSpec};
use crate::model::{HeadState, Vntpp};
use crate::predict::PositionPrediction;
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("intensity error needs a ground-truth process")]
    UnsupportedDataset,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Micro,
    Macro,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub f1_average: F1Average,
    pub accuracy: f64,
    pub time_rmse: f64,
    pub time_mae: f64,
    /// Unit of the time errors: 1 for raw timestamps, otherwise the gap
    /// they were divided by.
    pub time_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_mae: Option<f64>,
    /// Correct predictions per type.
    pub diversity: Vec<usize>,
    pub n_events: usize,
}

impl MetricsReport {
    /// Expresses the time errors in units of `scale` (e.g. the mean gap).
    pub fn with_time_scale(mut self, scale: f64) -> Self {
        self.time_rmse *= self.time_scale / scale;
        self.time_mae *= self.time_scale / scale;
        self.time_scale = scale;
        self
    }
}

/// F1 from `(true, predicted)` type pairs.
pub fn f1_score(pairs: &[(usize, usize)], k: usize, average: F1Average) -> f64 {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut support = vec![0usize; k];
    for &(t, p) in pairs {
        support[t] += 1;
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1_of = |tp: usize, fp: usize, fn_: usize| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * tp as f64 / d as f64
        }
    };
    match average {
        F1Average::Micro => f1_of(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum()),
        F1Average::Macro => (0..k).map(|i| f1_of(tp[i], fp[i], fn_[i])).sum::<f64>() / k as f64,
        F1Average::Weighted => {
            let n: usize = support.iter().sum();
            (0..k)
                .map(|i| f1_of(tp[i], fp[i], fn_[i]) * support[i] as f64)
                .sum::<f64>()
                / n.max(1) as f64
        }
    }
}

/// Aggregates per-position predictions. Time errors are on raw timestamps.
pub fn compute_metrics(
    preds: &[PositionPrediction],
    k: usize,
    average: F1Average,
) -> Result<MetricsReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let pairs: Vec<(usize, usize)> = preds.iter().map(|p| (p.k_true, p.k_hat)).collect();
    let mut diversity = vec![0usize; k];
    for &(t, p) in &pairs {
        if t == p {
            diversity[t] += 1;
        }
    }
    let n = preds.len() as f64;
    let errs: Vec<f64> = preds.iter().map(|p| p.t_hat - p.t_true).collect();
    Ok(MetricsReport {
        f1: f1_score(&pairs, k, average),
        f1_average: average,
        accuracy: diversity.iter().sum::<usize>() as f64 / n,
        time_rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        time_mae: errs.iter().map(|e| e.abs()).sum::<f64>() / n,
        time_scale: 1.0,
        intensity_rmse: None,
        intensity_mae: None,
        diversity,
        n_events: preds.len(),
    })
}

/// Root-mean-square and mean absolute error.
pub fn rmse_mae(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let (mut s2, mut s1) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        s2 += (p - t) * (p - t);
        s1 += (p - t).abs();
    }
    ((s2 / n).sqrt(), s1 / n)
}

/// Something that can report per-type intensities along a whole sequence
/// at given times (right-continuous at events).
pub trait IntensityModel {
    fn num_types(&self) -> usize;
    /// `out[j][k]` at `grid[j]`.
    fn trace(&self, seq: &EventSequence, grid: &[f64]) -> Result<Vec<Vec<f64>>, EvalError>;
}

impl IntensityModel for HawkesSpec {
    fn num_types(&self) -> usize {
        self.num_types
    }

    fn trace(&self, seq: &EventSequence, grid: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
        let ev = seq.events();
        Ok(grid
            .iter()
            .map(|&t| {
                let n = ev.partition_point(|e| e.t <= t);
                crate::hawkes::true_intensity(self, &ev[..n], t).expect("ordered")
            })
            .collect())
    }
}

/// Evaluates per-position head states along a grid.
pub fn trace_from_states(seq: &EventSequence, states: &[HeadState], grid: &[f64]) -> Vec<Vec<f64>> {
    let ev = seq.events();
    let k = states[0].lin.len();
    grid.iter()
        .map(|&t| {
            let n = ev.partition_point(|e| e.t <= t);
            let t_last = if n == 0 { 0.0 } else { ev[n - 1].t };
            let mut out = vec![0.0; k];
            states[n].rates(t - t_last, &mut out);
            out
        })
        .collect()
}

impl IntensityModel for Vntpp {
    fn num_types(&self) -> usize {
        Vntpp::num_types(self)
    }

    fn trace(&self, seq: &EventSequence, grid: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
        let states = self.history_states(&[seq])?.remove(0);
        Ok(trace_from_states(seq, &states, grid))
    }
}

/// Constant per-type rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantRates(pub Vec<f64>);

impl IntensityModel for ConstantRates {
    fn num_types(&self) -> usize {
        self.0.len()
    }

    fn trace(&self, _seq: &EventSequence, grid: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(vec![self.0.clone(); grid.len()])
    }
}

/// RMSE and MAE between a model's intensities and the true process' over
/// all `(type, grid point)` pairs of a uniform grid on `[0, T]`, averaged
/// over sequences.
pub fn intensity_error(
    model: &dyn IntensityModel,
    spec: Option<&HawkesSpec>,
    seqs: &[&EventSequence],
    resolution: usize,
) -> Result<(f64, f64), EvalError> {
    let spec = spec.ok_or(EvalError::UnsupportedDataset)?;
    if seqs.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut rmse, mut mae) = (0.0, 0.0);
    for seq in seqs {
        let truth = intensity_trace(spec, seq, resolution);
        let learned = model.trace(seq, &truth.grid)?;
        let flat_true: Vec<f64> = (0..truth.grid.len())
            .flat_map(|j| truth.values.iter().map(move |row| row[j]))
            .collect();
        let flat_learned: Vec<f64> = learned.into_iter().flatten().collect();
        let (r, m) = rmse_mae(&flat_learned, &flat_true);
        rmse += r;
        mae += m;
    }
    let n = seqs.len() as f64;
    Ok((rmse / n, mae / n))
}

/// Per-type constant rates minimizing squared error to the true intensity
/// on the evaluation grid (the grid mean of each type's intensity).
pub fn best_constant_rates(spec: &HawkesSpec, seqs: &[&EventSequence], resolution: usize) -> Vec<f64> {
    let mut sums = vec![0.0; spec.num_types];
    let mut count = 0usize;
    for seq in seqs {
        let tr = intensity_trace(spec, seq, resolution);
        for (k, row) in tr.values.iter().enumerate() {
            sums[k] += row.iter().sum::<f64>();
        }
        count += tr.grid.len();
    }
    sums.iter().map(|s| s / count as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdReport {
    pub singular_values: Vec<f64>,
    /// Centered latents on the top three right singular vectors.
    pub projections: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
}

impl SvdReport {
    /// Fraction of `Σ σ²` captured by the largest `n` singular values.
    pub fn energy_fraction(&self, n: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        let top: f64 = self.singular_values.iter().take(n).map(|s| s * s).sum();
        if total > 0.0 {
            top / total
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,label\n");
        for (p, l) in self.projections.iter().zip(&self.labels) {
            out.push_str(&format!("{},{},{},{l}\n", p[0], p[1], p[2]));
        }
        out
    }
}

/// Thin SVD of a row-major `rows × cols` matrix: `(U, σ, V)` with σ
/// descending, `U` as `rows × r` and `V` as `cols × r` column-major matrices.
pub fn svd(data: &[f64], rows: usize, cols: usize) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let x = DMatrix::from_row_slice(rows, cols, data);
    let mut s = x.svd(true, true);
    s.sort_by_singular_values();
    let u = s.u.expect("requested U");
    let v = s.v_t.expect("requested V").transpose();
    (u, s.singular_values.iter().copied().collect(), v)
}

/// SVD of centered latent vectors and their top-3 projections.
pub fn latent_svd(latents: &[(Vec<f64>, usize)]) -> Result<SvdReport, EvalError> {
    if latents.is_empty() {
        return Err(EvalError::Empty);
    }
    let j = latents[0].0.len();
    let n = latents.len();
    let mut mean = vec![0.0; j];
    for (z, _) in latents {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<f64> = latents
        .iter()
        .flat_map(|(z, _)| z.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let (_, sv, v) = svd(&centered, n, j);
    let r = v.ncols();
    let projections = (0..n)
        .map(|i| {
            let mut p = [0.0; 3];
            for (a, out) in p.iter_mut().enumerate().take(r.min(3)) {
                *out = (0..j).map(|c| centered[i * j + c] * v[(c, a)]).sum();
            }
            p
        })
        .collect();
    Ok(SvdReport {
        singular_values: sv,
        projections,
        labels: latents.iter().map(|(_, l)| *l).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub majority_baseline: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Multinomial logistic regression on `features` (standardized), trained
/// on a random half and scored on the other half.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    seed: u64,
) -> Result<ProbeReport, EvalError> {
    let n = features.len();
    if n < 2 {
        return Err(EvalError::Empty);
    }
    let d = features[0].len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let (train, test) = idx.split_at(n / 2);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for c in 0..d {
            mean[c] += features[i][c] / train.len() as f64;
        }
    }
    for &i in train {
        for c in 0..d {
            sd[c] += (features[i][c] - mean[c]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let norm = |i: usize| -> Vec<f64> { (0..d).map(|c| (features[i][c] - mean[c]) / sd[c]).collect() };
    let x_train: Vec<f64> = train.iter().flat_map(|&i| norm(i)).collect();
    let mut onehot = vec![0.0; train.len() * k];
    for (r, &i) in train.iter().enumerate() {
        onehot[r * k + labels[i]] = 1.0;
    }

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[d, k]));
    let b = store.add("b", Tensor::zeros(&[k]));
    let mut adam = AdamState::new(&store, AdamConfig::with_lr(0.05));
    let x = Tensor::new(vec![train.len(), d], x_train)?;
    let y = Tensor::new(vec![train.len(), k], onehot)?;
    for _ in 0..500 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let logits = tape.matmul(xv, wv)?;
        let logits = tape.add(logits, bv)?;
        let lp = tape.log_softmax(logits)?;
        let ll = tape.mul(lp, yv)?;
        let ll = tape.sum(ll)?;
        let loss = tape.scale(ll, -1.0 / train.len() as f64)?;
        store.zero_grad();
        tape.backward(loss, &mut store)?;
        adam.step(&mut store);
    }

    let wd = store.value(w).data();
    let bd = store.value(b).data();
    let mut correct = 0usize;
    for &i in test {
        let f = norm(i);
        let scores: Vec<f64> = (0..k)
            .map(|c| bd[c] + (0..d).map(|r| f[r] * wd[r * k + c]).sum::<f64>())
            .collect();
        if crate::predict::argmax(&scores) == labels[i] {
            correct += 1;
        }
    }
    let mut counts = vec![0usize; k];
    for &i in test {
        counts[labels[i]] += 1;
    }
    Ok(ProbeReport {
        accuracy: correct as f64 / test.len() as f64,
        majority_baseline: *counts.iter().max().unwrap() as f64 / test.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub ks: f64,
    pub p: f64,
    pub n: usize,
}

/// Asymptotic Kolmogorov distribution tail `P(K > x)`.
fn kolmogorov_tail(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * x * x).exp();
        s += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS test of `samples` against Exp(1).
pub fn ks_exponential(samples: &[f64]) -> KsReport {
    let n = samples.len();
    let mut u: Vec<f64> = samples.iter().map(|&x| 1.0 - (-x.max(0.0)).exp()).collect();
    u.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut d: f64 = 0.0;
    for (i, &v) in u.iter().enumerate() {
        d = d
            .max((i + 1) as f64 / n as f64 - v)
            .max(v - i as f64 / n as f64);
    }
    let sn = (n as f64).sqrt();
    let p = kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
    KsReport { ks: d, p, n }
}

/// Joins per-sequence rescaled gaps into one unit-rate stream: each
/// sequence's censored tail is carried into the next sequence's first gap.
/// Dropping the tails instead biases every sequence's gaps short by O(1/n).
/// Only the final tail is lost.
pub fn chain_gaps(parts: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Vec<f64> {
    let mut out = Vec::new();
    let mut carry = 0.0;
    for (mut gaps, tail) in parts {
        if let Some(first) = gaps.first_mut() {
            *first += carry;
            carry = 0.0;
        }
        out.extend(gaps);
        carry += tail;
    }
    out
}

/// Time-rescaling test for a Hawkes process on held-out sequences.
pub fn rescaling_gof(spec: &HawkesSpec, seqs: &[&EventSequence]) -> Result<KsReport, EvalError> {
    let mut parts = Vec::with_capacity(seqs.len());
    for s in seqs {
        parts.push((rescaled_gaps(spec, s)?, rescaled_tail(spec, s)?));
    }
    let gaps = chain_gaps(parts);
    if gaps.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(ks_exponential(&gaps))
}

/// Time-rescaling test for the learned model; each interval's compensator
/// is integrated with the trapezoid rule on `points` nodes.
pub fn rescaling_gof_model(
    model: &Vntpp,
    seqs: &[&EventSequence],
    points: usize,
) -> Result<KsReport, EvalError> {
    let states = model.history_states(seqs)?;
    let mut buf = vec![0.0; model.num_types()];
    let mut integral = |st: &HeadState, span: f64| {
        let grid = uniform_grid(0.0, span, points.max(2));
        let h = grid[1] - grid[0];
        let mut total = 0.0;
        for (j, &dt) in grid.iter().enumerate() {
            st.rates(dt, &mut buf);
            let v: f64 = buf.iter().sum();
            total += if j == 0 || j == grid.len() - 1 { 0.5 * v } else { v };
        }
        total * h
    };
    let mut parts = Vec::with_capacity(seqs.len());
    for (seq, st) in seqs.iter().zip(&states) {
        let mut prev = 0.0;
        let mut gaps = Vec::with_capacity(seq.len());
        for (i, e) in seq.events().iter().enumerate() {
            gaps.push(integral(&st[i], e.t - prev));
            prev = e.t;
        }
        let tail = integral(&st[seq.len()], (seq.horizon() - prev).max(0.0));
        parts.push((gaps, tail));
    }
    let gaps = chain_gaps(parts);
    if gaps.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(ks_exponential(&gaps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_f1_constant_predictor() {
        let pairs: Vec<(usize, usize)> = (0..100).map(|i| (i % 2, 0)).collect();
        assert!((f1_score(&pairs, 2, F1Average::Micro) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // P(K > 1.36) ≈ 0.0494, P(K > 1.63) ≈ 0.0098
        assert!((kolmogorov_tail(1.36) - 0.0494).abs() < 5e-4);
        assert!((kolmogorov_tail(1.63) - 0.0098).abs() < 2e-4);
    }
}
