//! Maximum-likelihood Hawkes baselines with exponential or Gaussian kernels.
//!
//! Parameters are unconstrained reals mapped through softplus. The
//! log-likelihood is built on the autodiff tape from (event, earlier event)
//! pairs; the exponential compensator is exact, the Gaussian one uses
//! stratified Monte Carlo over each event's kernel support.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tpp_autodiff::{softplus, AdamConfig, AdamState, AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

use crate::data::{Dataset, EventSequence};
use crate::hawkes::{log_likelihood, HawkesSpec, Kernel};
use crate::predict::{predict_next, HawkesIntensity, PredictionResult, Scheme};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Exponential,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Train the kernel's shape parameters; otherwise keep their initial values.
    pub fit_kernel: bool,
    /// Fit a homogeneous Poisson process (no excitation).
    pub zero_excitation: bool,
    /// Starting point; defaults derived from the data.
    pub init: Option<HawkesSpec>,
    /// Monte Carlo points per event for the Gaussian compensator.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.01,
            fit_kernel: true,
            zero_excitation: false,
            init: None,
            mc_samples: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub kernel: KernelKind,
    /// Mean log-likelihood per sequence at the returned parameters.
    pub train_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesFit {
    #[serde(flatten)]
    pub spec: HawkesSpec,
    pub fit_meta: FitMeta,
}

impl HawkesFit {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn inv_softplus(y: f64) -> f64 {
    let y = y.max(1e-8);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Flattened events and (event, earlier event) pairs of a dataset.
struct Layout {
    k: usize,
    n_seq: usize,
    types: Vec<usize>,
    times: Vec<f64>,
    /// `(first event, end, horizon)` per sequence.
    seqs: Vec<(usize, usize, f64)>,
    /// `T − t_i` per event.
    remaining: Vec<f64>,
    total_time: f64,
    pair_target: Vec<usize>,
    pair_source_cell: Vec<usize>,
    pair_lag: Vec<f64>,
}

impl Layout {
    fn new(data: &Dataset, with_pairs: bool) -> Self {
        let k = data.num_types;
        let mut l = Layout {
            k,
            n_seq: data.len(),
            types: Vec::new(),
            times: Vec::new(),
            seqs: Vec::new(),
            remaining: Vec::new(),
            total_time: 0.0,
            pair_target: Vec::new(),
            pair_source_cell: Vec::new(),
            pair_lag: Vec::new(),
        };
        for s in &data.sequences {
            let base = l.types.len();
            let ev = s.events();
            for (i, e) in ev.iter().enumerate() {
                l.types.push(e.k);
                l.times.push(e.t);
                l.remaining.push(s.horizon() - e.t);
                if !with_pairs {
                    continue;
                }
                for src in &ev[..i] {
                    l.pair_target.push(base + i);
                    l.pair_source_cell.push(e.k * k + src.k);
                    l.pair_lag.push(e.t - src.t);
                }
            }
            l.seqs.push((base, base + ev.len(), s.horizon()));
            l.total_time += s.horizon();
        }
        l
    }

    fn n(&self) -> usize {
        self.types.len()
    }
}

struct Params {
    mu: ParamId,
    a: Option<ParamId>,
    shape: Vec<ParamId>,
}

fn positive(tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var, AutodiffError> {
    let raw = tape.param(store, id);
    tape.softplus(raw)
}

/// Kernel density at constant lags `[n, 1]`.
fn kernel_density(
    tape: &mut Tape,
    kind: KernelKind,
    shape: &[Var],
    lags: Var,
) -> Result<Var, AutodiffError> {
    match kind {
        KernelKind::Exponential => {
            let beta = shape[0];
            let x = tape.mul(lags, beta)?;
            let x = tape.scale(x, -1.0)?;
            let e = tape.exp(x)?;
            tape.mul(e, beta)
        }
        KernelKind::Gaussian => {
            let (center, width) = (shape[0], shape[1]);
            let lw = tape.log(width)?;
            let nlw = tape.scale(lw, -1.0)?;
            let inv_w = tape.exp(nlw)?;
            let d = tape.sub(lags, center)?;
            let z = tape.mul(d, inv_w)?;
            let z2 = tape.mul(z, z)?;
            let z2 = tape.scale(z2, -0.5)?;
            let e = tape.exp(z2)?;
            let e = tape.mul(e, inv_w)?;
            tape.scale(e, 1.0 / (2.0 * PI).sqrt())
        }
    }
}

/// Mean negative log-likelihood per sequence.
fn nll(
    tape: &mut Tape,
    store: &ParamStore,
    p: &Params,
    kind: KernelKind,
    lay: &Layout,
    mc: &[f64],
    mc_samples: usize,
) -> Result<Var, AutodiffError> {
    let (k, n) = (lay.k, lay.n());
    let mu = positive(tape, store, p.mu)?;
    let mu_col = tape.reshape(mu, &[k, 1])?;
    let mut lam = tape.embedding(mu_col, &lay.types, &[n])?;
    let mu_total = tape.sum(mu)?;
    let mut comp = tape.scale(mu_total, lay.total_time)?;

    if let Some(a_id) = p.a {
        let shape: Vec<Var> = p
            .shape
            .iter()
            .map(|&id| positive(tape, store, id))
            .collect::<Result<_, _>>()?;
        let a = positive(tape, store, a_id)?;

        if !lay.pair_lag.is_empty() {
            let np = lay.pair_lag.len();
            let a_cells = tape.reshape(a, &[k * k, 1])?;
            let a_pair = tape.embedding(a_cells, &lay.pair_source_cell, &[np])?;
            let lags = tape.constant(Tensor::new(vec![np, 1], lay.pair_lag.clone())?);
            let f = kernel_density(tape, kind, &shape, lags)?;
            let contrib = tape.mul(a_pair, f)?;
            let contrib = tape.reshape(contrib, &[np])?;
            let excite = tape.segment_sum(contrib, &lay.pair_target, n)?;
            let excite = tape.reshape(excite, &[n, 1])?;
            lam = tape.add(lam, excite)?;
        }

        // Mass of each event's kernel inside the window.
        let a_t = tape.transpose_last(a)?;
        let col = tape.sum_last(a_t)?;
        let col = tape.reshape(col, &[k, 1])?;
        let col_ev = tape.embedding(col, &lay.types, &[n])?;
        let mass = match kind {
            KernelKind::Exponential => {
                let rem = tape.constant(Tensor::new(vec![n, 1], lay.remaining.clone())?);
                let x = tape.mul(rem, shape[0])?;
                let x = tape.scale(x, -1.0)?;
                let e = tape.exp(x)?;
                let e = tape.scale(e, -1.0)?;
                tape.add_scalar(e, 1.0)?
            }
            KernelKind::Gaussian => {
                let m = mc_samples;
                let c = tape.value(shape[0]).item();
                let w = tape.value(shape[1]).item();
                let support = c + 8.0 * w;
                let mut s = Vec::with_capacity(n * m);
                let mut wt = Vec::with_capacity(n * m);
                for (i, &rem) in lay.remaining.iter().enumerate() {
                    let span = rem.min(support);
                    for j in 0..m {
                        s.push(span * (j as f64 + mc[i * m + j]) / m as f64);
                        wt.push(span / m as f64);
                    }
                }
                let s = tape.constant(Tensor::new(vec![n * m, 1], s)?);
                let wt = tape.constant(Tensor::new(vec![n * m, 1], wt)?);
                let f = kernel_density(tape, kind, &shape, s)?;
                let f = tape.mul(f, wt)?;
                let f = tape.reshape(f, &[n, m])?;
                let f = tape.sum_last(f)?;
                tape.reshape(f, &[n, 1])?
            }
        };
        let ce = tape.mul(col_ev, mass)?;
        let ce = tape.sum(ce)?;
        comp = tape.add(comp, ce)?;
    }

    let log_lam = tape.log(lam)?;
    let ll = tape.sum(log_lam)?;
    let obj = tape.sub(ll, comp)?;
    tape.scale(obj, -1.0 / lay.n_seq as f64)
}

fn default_init(data: &Dataset, kind: KernelKind) -> HawkesSpec {
    let k = data.num_types;
    let total: f64 = data.sequences.iter().map(|s| s.horizon()).sum();
    let counts = data.type_counts();
    let gap = data.mean_gap().max(1e-6);
    HawkesSpec {
        num_types: k,
        mu: counts.iter().map(|&c| (0.5 * c as f64 / total).max(1e-3)).collect(),
        a: vec![vec![0.1; k]; k],
        kernel: match kind {
            KernelKind::Exponential => Kernel::Exponential { beta: 1.0 / gap },
            KernelKind::Gaussian => Kernel::Gaussian {
                center: gap,
                width: gap,
            },
        },
        horizon: None,
    }
}

fn read_spec(store: &ParamStore, p: &Params, kind: KernelKind, k: usize) -> HawkesSpec {
    let sp = |id: ParamId| -> Vec<f64> { store.value(id).data().iter().map(|&x| softplus(x)).collect() };
    let mu = sp(p.mu);
    let a = match p.a {
        Some(id) => sp(id).chunks(k).map(|r| r.to_vec()).collect(),
        None => vec![vec![0.0; k]; k],
    };
    let kernel = match (kind, p.shape.as_slice()) {
        (KernelKind::Exponential, [b]) => Kernel::Exponential { beta: sp(*b)[0] },
        (KernelKind::Gaussian, [c, w]) => Kernel::Gaussian {
            center: sp(*c)[0],
            width: sp(*w)[0],
        },
        _ => unreachable!("shape parameters match the kernel"),
    };
    HawkesSpec {
        num_types: k,
        mu,
        a,
        kernel,
        horizon: None,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exact mean negative log-likelihood of an exponential-kernel process and
/// its gradient in `(mu, a, beta)`, by the usual O(n·K) recursion.
fn exponential_nll(lay: &Layout, mu: &[f64], a: Option<&[f64]>, beta: f64) -> (f64, Vec<f64>, Vec<f64>, f64) {
    let k = lay.k;
    let mut g_mu = vec![0.0; k];
    let mut g_a = vec![0.0; k * k];
    let mut g_beta = 0.0;
    let mut obj = 0.0;
    // r[j] = Σ e^{−β(t−s)}, d[j] = Σ (t−s) e^{−β(t−s)} over earlier events s of type j.
    let mut r = vec![0.0; k];
    let mut d = vec![0.0; k];
    for &(start, end, horizon) in &lay.seqs {
        r.iter_mut().for_each(|x| *x = 0.0);
        d.iter_mut().for_each(|x| *x = 0.0);
        for i in start..end {
            let ki = lay.types[i];
            if i > start {
                let dt = lay.times[i] - lay.times[i - 1];
                let e = (-beta * dt).exp();
                r[lay.types[i - 1]] += 1.0;
                for j in 0..k {
                    d[j] = e * (d[j] + dt * r[j]);
                    r[j] *= e;
                }
            }
            let mut lam = mu[ki];
            if let Some(a) = a {
                let row = &a[ki * k..(ki + 1) * k];
                lam += beta * row.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>();
                let g = 1.0 / lam;
                for j in 0..k {
                    g_a[ki * k + j] += g * beta * r[j];
                    g_beta += g * row[j] * (r[j] - beta * d[j]);
                }
                let rem = horizon - lay.times[i];
                let e = (-beta * rem).exp();
                for kk in 0..k {
                    obj -= a[kk * k + ki] * (1.0 - e);
                    g_a[kk * k + ki] -= 1.0 - e;
                    g_beta -= a[kk * k + ki] * rem * e;
                }
            }
            obj += lam.ln();
            g_mu[ki] += 1.0 / lam;
        }
        for kk in 0..k {
            obj -= mu[kk] * horizon;
            g_mu[kk] -= horizon;
        }
    }
    let s = -1.0 / lay.n_seq as f64;
    g_mu.iter_mut().for_each(|g| *g *= s);
    g_a.iter_mut().for_each(|g| *g *= s);
    (obj * s, g_mu, g_a, g_beta * s)
}

/// Loss at the current parameters, leaving its gradient in the store.
fn exponential_step(store: &mut ParamStore, p: &Params, lay: &Layout) -> Result<f64, AutodiffError> {
    let raw = |store: &ParamStore, id: ParamId| store.value(id).data().to_vec();
    let mu_raw = raw(store, p.mu);
    let beta_raw = raw(store, p.shape[0])[0];
    let a_raw = p.a.map(|id| raw(store, id));
    let mu: Vec<f64> = mu_raw.iter().map(|&x| softplus(x)).collect();
    let a: Option<Vec<f64>> = a_raw.as_ref().map(|v| v.iter().map(|&x| softplus(x)).collect());
    let (value, g_mu, g_a, g_beta) = exponential_nll(lay, &mu, a.as_deref(), softplus(beta_raw));
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { op: "hawkes_nll" });
    }
    store.zero_grad();
    for (g, (dst, x)) in g_mu.iter().zip(store.get_mut(p.mu).grad.iter_mut().zip(&mu_raw)) {
        *dst = g * sigmoid(*x);
    }
    if let (Some(id), Some(a_raw)) = (p.a, &a_raw) {
        for (g, (dst, x)) in g_a.iter().zip(store.get_mut(id).grad.iter_mut().zip(a_raw)) {
            *dst = g * sigmoid(*x);
        }
        store.get_mut(p.shape[0]).grad[0] = g_beta * sigmoid(beta_raw);
    }
    Ok(value)
}

/// Fits a Hawkes process by full-batch Adam on the mean negative
/// log-likelihood and returns the best parameters seen.
pub fn fit_hawkes(
    data: &Dataset,
    kind: KernelKind,
    opts: &FitOptions,
) -> Result<HawkesFit, AutodiffError> {
    assert!(!data.is_empty(), "cannot fit an empty dataset");
    let k = data.num_types;
    let init = opts.init.clone().unwrap_or_else(|| default_init(data, kind));
    let mut store = ParamStore::new();
    let raw = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| inv_softplus(x)).collect());
    let mu = store.add("mu", raw(&init.mu));
    let shape = match (kind, init.kernel) {
        (KernelKind::Exponential, Kernel::Exponential { beta }) => vec![store.add("beta", raw(&[beta]))],
        (KernelKind::Gaussian, Kernel::Gaussian { center, width }) => vec![
            store.add("center", raw(&[center])),
            store.add("width", raw(&[width])),
        ],
        _ => {
            return Err(AutodiffError::Invalid {
                op: "fit_hawkes",
                msg: "initial spec kernel does not match the requested kernel".into(),
            })
        }
    };
    let a = if opts.zero_excitation {
        None
    } else {
        let flat: Vec<f64> = init.a.iter().flatten().copied().collect();
        Some(store.add("a", raw(&flat).reshaped(vec![k, k])?))
    };
    let params = Params { mu, a, shape };
    let lay = Layout::new(data, kind == KernelKind::Gaussian);
    let mut adam = AdamState::new(&store, AdamConfig::with_lr(opts.learning_rate));
    let m = opts.mc_samples.max(1);

    let mut best = (f64::INFINITY, store.clone());
    let mut prev = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.iterations {
        let value = match kind {
            KernelKind::Exponential => exponential_step(&mut store, &params, &lay)?,
            KernelKind::Gaussian => {
                let mut rng = rng_from_seed(derive_seed(&[opts.seed, it as u64]));
                let mc: Vec<f64> = if params.a.is_some() {
                    (0..lay.n() * m).map(|_| rng.gen::<f64>()).collect()
                } else {
                    Vec::new()
                };
                let mut tape = Tape::new();
                let loss = nll(&mut tape, &store, &params, kind, &lay, &mc, m)?;
                let value = tape.value(loss).item();
                store.zero_grad();
                tape.backward(loss, &mut store)?;
                value
            }
        };
        if value < best.0 {
            best = (value, store.clone());
        }
        if opts.zero_excitation || !opts.fit_kernel {
            for &id in &params.shape {
                store.get_mut(id).grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        adam.step(&mut store);
        iterations = it + 1;
        converged = ((value - prev) / value.abs().max(1e-12)).abs() <= 1e-6;
        prev = value;
    }
    // Score the last iterate too.
    let spec_last = read_spec(&store, &params, kind, k);
    let ll_last = mean_loglik(&spec_last, data);
    let spec_best = read_spec(&best.1, &params, kind, k);
    let ll_best = mean_loglik(&spec_best, data);
    let (spec, train_loglik) = if ll_last >= ll_best {
        (spec_last, ll_last)
    } else {
        (spec_best, ll_best)
    };
    if !converged {
        log::info!("hawkes fit stopped after {iterations} iterations without converging");
    }
    Ok(HawkesFit {
        spec,
        fit_meta: FitMeta {
            kernel: kind,
            train_loglik,
            converged,
            iterations,
        },
    })
}

/// Mean exact log-likelihood per sequence.
pub fn mean_loglik(spec: &HawkesSpec, data: &Dataset) -> f64 {
    let total: f64 = data
        .sequences
        .iter()
        .map(|s| log_likelihood(spec, s).expect("valid spec"))
        .sum();
    total / data.len() as f64
}

/// Next-event prediction under a fitted process.
pub fn hawkes_predict(
    fit: &HawkesFit,
    history: &EventSequence,
    upto: usize,
    mean_gap: f64,
    n_points: usize,
    scheme: Scheme,
) -> PredictionResult {
    let m = HawkesIntensity {
        spec: &fit.spec,
        history: history.prefix(upto),
    };
    predict_next(&m, mean_gap, n_points, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;

    #[test]
    fn recursive_gradient_matches_tape() {
        let seqs = vec![
            EventSequence::new(
                vec![Event::new(0, 0.3), Event::new(1, 0.8), Event::new(1, 1.25), Event::new(0, 2.0)],
                3.0,
            )
            .unwrap(),
            EventSequence::new(vec![Event::new(1, 1.1), Event::new(0, 1.9)], 2.5).unwrap(),
        ];
        let data = Dataset::new("t", seqs, Some(2)).unwrap();
        let mut store = ParamStore::new();
        let mu = store.add("mu", Tensor::from_vec(vec![-0.3, 0.2]));
        let a = store.add("a", Tensor::new(vec![2, 2], vec![0.1, -1.0, 0.4, -0.2]).unwrap());
        let beta = store.add("beta", Tensor::from_vec(vec![0.7]));
        let p = Params { mu, a: Some(a), shape: vec![beta] };

        let lay = Layout::new(&data, true);
        let mut tape = Tape::new();
        let loss = nll(&mut tape, &store, &p, KernelKind::Exponential, &lay, &[], 1).unwrap();
        let expected = tape.value(loss).item();
        let mut reference = store.clone();
        reference.zero_grad();
        tape.backward(loss, &mut reference).unwrap();

        let lay = Layout::new(&data, false);
        let value = exponential_step(&mut store, &p, &lay).unwrap();
        assert!((value - expected).abs() < 1e-12);
        for id in [mu, a, beta] {
            for (x, y) in store.get(id).grad.iter().zip(&reference.get(id).grad) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [1e-3, 0.5, 2.0, 40.0] {
            assert!((softplus(inv_softplus(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }
}
