//! Multivariate Hawkes processes: intensity, Ogata thinning, compensators.
//!
//! The intensity of type `k` is
//!
//! ```text
//! λ_k(t) = μ_k + Σ_{(k', t') : t' ≤ t} a[k][k'] · f(t − t')
//! ```
//!
//! where `f` is a probability density on `[0, ∞)`-lags: `β·e^{−β s}` for the
//! exponential kernel, a normal density for the Gaussian one. Because `f`
//! integrates to one, `a[k][k']` is the expected number of type-`k`
//! children of one type-`k'` event.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::data::{Dataset, Event, EventSequence};
use crate::rng::{stream_rng, TppRng};

pub const DEFAULT_MAX_EVENTS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum HawkesError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("time {t} precedes history event at {last}")]
    TimeOrder { t: f64, last: f64 },
    #[error("simulation exceeded {0} events; the process looks explosive")]
    ExplosionGuard(usize),
    #[error("closed-form compensator needs the exponential kernel")]
    UnsupportedKernel,
    #[error("invalid interval [{0}, {1}]")]
    Interval(f64, f64),
    #[error("simulation produced no events")]
    EmptyRealization,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Exponential { beta: f64 },
    Gaussian { center: f64, width: f64 },
}

impl Kernel {
    /// Kernel density at lag `s ≥ 0`.
    pub fn density(&self, s: f64) -> f64 {
        match *self {
            Kernel::Exponential { beta } => beta * (-beta * s).exp(),
            Kernel::Gaussian { center, width } => {
                let z = (s - center) / width;
                (-0.5 * z * z).exp() / (width * (2.0 * PI).sqrt())
            }
        }
    }

    /// Largest density over lags in `[lo, hi]`.
    fn sup_density(&self, lo: f64, hi: f64) -> f64 {
        match *self {
            Kernel::Exponential { .. } => self.density(lo),
            Kernel::Gaussian { center, .. } => {
                if (lo..=hi).contains(&center) {
                    self.density(center)
                } else {
                    self.density(lo).max(self.density(hi))
                }
            }
        }
    }

    /// Lag beyond which the density is negligible (< e^-70 relative).
    fn support_end(&self) -> f64 {
        match *self {
            Kernel::Exponential { beta } => 70.0 / beta,
            Kernel::Gaussian { center, width } => center + 12.0 * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesSpec {
    #[serde(rename = "K")]
    pub num_types: usize,
    pub mu: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub kernel: Kernel,
    /// Observation window used when generating datasets from this spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

/// The excitation matrix may allow explosive growth.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityWarning {
    pub max_row_sum: f64,
}

impl std::fmt::Display for StabilityWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "largest excitation row sum {} is not below 1; the process may explode",
            self.max_row_sum
        )
    }
}

impl HawkesSpec {
    pub fn load(path: &Path) -> Result<Self, HawkesError> {
        let spec: HawkesSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Structural checks. Returns a warning when the largest row sum of `a`
    /// is not below one (the sufficient stationarity condition for unit-mass
    /// kernels).
    pub fn validate(&self) -> Result<Option<StabilityWarning>, HawkesError> {
        let k = self.num_types;
        if k == 0 || self.mu.len() != k || self.a.len() != k || self.a.iter().any(|r| r.len() != k)
        {
            return Err(HawkesError::InvalidSpec(format!(
                "dimensions do not match K={k}"
            )));
        }
        if self.mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(HawkesError::InvalidSpec("mu must be positive".into()));
        }
        if self.a.iter().flatten().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(HawkesError::InvalidSpec("a must be non-negative".into()));
        }
        match self.kernel {
            Kernel::Exponential { beta } if !(beta > 0.0) => {
                return Err(HawkesError::InvalidSpec("beta must be positive".into()))
            }
            Kernel::Gaussian { center, width } if !(center >= 0.0 && width > 0.0) => {
                return Err(HawkesError::InvalidSpec(
                    "gaussian kernel needs center >= 0 and width > 0".into(),
                ))
            }
            _ => {}
        }
        let max_row_sum = self
            .a
            .iter()
            .map(|r| r.iter().sum::<f64>())
            .fold(0.0, f64::max);
        if max_row_sum >= 1.0 {
            let w = StabilityWarning { max_row_sum };
            log::warn!("excitation row sum {max_row_sum} >= 1: process may be unstable");
            return Ok(Some(w));
        }
        Ok(None)
    }

    /// Σ_k a[k][k'] for each source type k'.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.num_types)
            .map(|j| self.a.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// Stationary mean rate per type, `(I − a)⁻¹ μ`, by fixed-point iteration.
    pub fn stationary_rates(&self) -> Vec<f64> {
        let mut r = self.mu.clone();
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..self.num_types)
                .map(|k| self.mu[k] + (0..self.num_types).map(|j| self.a[k][j] * r[j]).sum::<f64>())
                .collect();
            let diff: f64 = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum();
            r = next;
            if diff < 1e-13 {
                break;
            }
        }
        r
    }
}

/// `λ_k(t)` for every type given the events in `history` (all at or before
/// `t`). Right-continuous: an event exactly at `t` contributes `f(0)`.
pub fn true_intensity(spec: &HawkesSpec, history: &[Event], t: f64) -> Result<Vec<f64>, HawkesError> {
    if let Some(last) = history.last() {
        if t < last.t {
            return Err(HawkesError::TimeOrder { t, last: last.t });
        }
    }
    Ok(intensity_unchecked(spec, history, t))
}

fn intensity_unchecked(spec: &HawkesSpec, history: &[Event], t: f64) -> Vec<f64> {
    let mut lam = spec.mu.clone();
    let cutoff = spec.kernel.support_end();
    for e in history.iter().rev() {
        let lag = t - e.t;
        if lag > cutoff {
            break;
        }
        let f = spec.kernel.density(lag);
        for (k, l) in lam.iter_mut().enumerate() {
            *l += spec.a[k][e.k] * f;
        }
    }
    lam
}

/// Simulates event times on `(0, horizon]` with Ogata's thinning.
///
/// For the exponential kernel the bound is the total intensity right after
/// the current time, which can only decay until the next event. For the
/// Gaussian kernel the bound is the sum of each past event's kernel maximum
/// over a look-ahead window of one kernel width.
pub fn simulate_events(
    spec: &HawkesSpec,
    horizon: f64,
    rng: &mut TppRng,
    max_events: usize,
) -> Result<Vec<Event>, HawkesError> {
    if !(horizon > 0.0) {
        return Err(HawkesError::InvalidSpec(format!("horizon {horizon} must be positive")));
    }
    match spec.kernel {
        Kernel::Exponential { beta } => simulate_exponential(spec, beta, horizon, rng, max_events),
        Kernel::Gaussian { width, .. } => simulate_generic(spec, width, horizon, rng, max_events),
    }
}

fn pick_type(lam: &[f64], total: f64, rng: &mut TppRng) -> usize {
    let mut u = rng.gen::<f64>() * total;
    for (k, &l) in lam.iter().enumerate() {
        if u < l {
            return k;
        }
        u -= l;
    }
    lam.len() - 1
}

fn simulate_exponential(
    spec: &HawkesSpec,
    beta: f64,
    horizon: f64,
    rng: &mut TppRng,
    max_events: usize,
) -> Result<Vec<Event>, HawkesError> {
    let k = spec.num_types;
    // excite[k] = Σ a[k][k_j]·β·e^{−β(t − t_j)} at the current time.
    let mut excite = vec![0.0; k];
    let mut lam = vec![0.0; k];
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        let bound: f64 = spec.mu.iter().sum::<f64>() + excite.iter().sum::<f64>();
        let w = Exp::new(bound).expect("positive rate").sample(rng);
        t += w;
        if t > horizon {
            break;
        }
        let decay = (-beta * w).exp();
        excite.iter_mut().for_each(|x| *x *= decay);
        for i in 0..k {
            lam[i] = spec.mu[i] + excite[i];
        }
        let total: f64 = lam.iter().sum();
        if rng.gen::<f64>() * bound <= total {
            let kk = pick_type(&lam, total, rng);
            events.push(Event::new(kk, t));
            if events.len() > max_events {
                return Err(HawkesError::ExplosionGuard(max_events));
            }
            for (i, x) in excite.iter_mut().enumerate() {
                *x += spec.a[i][kk] * beta;
            }
        }
    }
    Ok(events)
}

fn simulate_generic(
    spec: &HawkesSpec,
    window: f64,
    horizon: f64,
    rng: &mut TppRng,
    max_events: usize,
) -> Result<Vec<Event>, HawkesError> {
    let col = spec.column_sums();
    let mu_total: f64 = spec.mu.iter().sum();
    let cutoff = spec.kernel.support_end();
    let mut t = 0.0;
    let mut events: Vec<Event> = Vec::new();
    loop {
        let end = t + window;
        let mut bound = mu_total;
        for e in events.iter().rev() {
            if t - e.t > cutoff {
                break;
            }
            bound += col[e.k] * spec.kernel.sup_density(t - e.t, end - e.t);
        }
        let w = Exp::new(bound).expect("positive rate").sample(rng);
        if t + w > end {
            t = end;
            if t > horizon {
                break;
            }
            continue;
        }
        t += w;
        if t > horizon {
            break;
        }
        let lam = intensity_unchecked(spec, &events, t);
        let total: f64 = lam.iter().sum();
        debug_assert!(total <= bound * (1.0 + 1e-9));
        if rng.gen::<f64>() * bound <= total {
            let kk = pick_type(&lam, total, rng);
            events.push(Event::new(kk, t));
            if events.len() > max_events {
                return Err(HawkesError::ExplosionGuard(max_events));
            }
        }
    }
    Ok(events)
}

/// Draws one nonempty sequence on `[0, horizon]`, deterministic in `seed`.
pub fn simulate(spec: &HawkesSpec, horizon: f64, seed: u64) -> Result<EventSequence, HawkesError> {
    let mut rng = stream_rng(seed, 0);
    let events = simulate_events(spec, horizon, &mut rng, DEFAULT_MAX_EVENTS)?;
    if events.is_empty() {
        return Err(HawkesError::EmptyRealization);
    }
    Ok(EventSequence::new(events, horizon).expect("thinning yields ordered times"))
}

/// Generates `n` nonempty sequences. Sequence `i` comes from stream `i` of
/// the generator keyed by `seed` (empty draws move on to later streams), so
/// the result does not depend on thread count.
pub fn generate_dataset(
    spec: &HawkesSpec,
    n: usize,
    horizon: f64,
    seed: u64,
    name: &str,
) -> Result<Dataset, HawkesError> {
    let mut sequences = Vec::with_capacity(n);
    let mut next_stream = 0u64;
    while sequences.len() < n {
        let need = n - sequences.len();
        let streams: Vec<u64> = (next_stream..next_stream + need as u64).collect();
        next_stream += need as u64;
        let drawn: Result<Vec<Vec<Event>>, HawkesError> = streams
            .par_iter()
            .map(|&s| {
                let mut rng = stream_rng(seed, s);
                simulate_events(spec, horizon, &mut rng, DEFAULT_MAX_EVENTS)
            })
            .collect();
        for ev in drawn? {
            if !ev.is_empty() {
                sequences.push(EventSequence::new(ev, horizon).expect("ordered"));
            }
        }
    }
    Ok(Dataset::new(name, sequences, Some(spec.num_types)).expect("types within K"))
}

/// `∫_{t0}^{t1} Σ_k λ_k(t) dt` in closed form (exponential kernel only).
pub fn compensator_closed_form(
    spec: &HawkesSpec,
    events: &[Event],
    t0: f64,
    t1: f64,
) -> Result<f64, HawkesError> {
    let Kernel::Exponential { beta } = spec.kernel else {
        return Err(HawkesError::UnsupportedKernel);
    };
    if !(t0 <= t1) {
        return Err(HawkesError::Interval(t0, t1));
    }
    let col = spec.column_sums();
    let mut total = spec.mu.iter().sum::<f64>() * (t1 - t0);
    for e in events.iter().take_while(|e| e.t < t1) {
        let start = (-beta * (t0 - e.t).max(0.0)).exp();
        let end = (-beta * (t1 - e.t)).exp();
        total += col[e.k] * (start - end);
    }
    Ok(total)
}

/// `∫_{t0}^{t1} Σ_k λ_k(t) dt` for either kernel; the Gaussian case uses
/// the normal distribution function.
pub fn compensator(spec: &HawkesSpec, events: &[Event], t0: f64, t1: f64) -> Result<f64, HawkesError> {
    match spec.kernel {
        Kernel::Exponential { .. } => compensator_closed_form(spec, events, t0, t1),
        Kernel::Gaussian { center, width } => {
            if !(t0 <= t1) {
                return Err(HawkesError::Interval(t0, t1));
            }
            let cdf = |s: f64| 0.5 * (1.0 + erf((s - center) / (width * std::f64::consts::SQRT_2)));
            let col = spec.column_sums();
            let mut total = spec.mu.iter().sum::<f64>() * (t1 - t0);
            for e in events.iter().take_while(|e| e.t < t1) {
                let lo = (t0 - e.t).max(0.0);
                total += col[e.k] * (cdf(t1 - e.t) - cdf(lo));
            }
            Ok(total)
        }
    }
}

/// Compensator of each inter-event interval `[t_{i-1}, t_i]` (with `t_0 = 0`)
/// in closed form. Under the true model these are i.i.d. Exp(1).
pub fn rescaled_gaps(spec: &HawkesSpec, seq: &EventSequence) -> Result<Vec<f64>, HawkesError> {
    let ev = seq.events();
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(ev.len());
    for (i, e) in ev.iter().enumerate() {
        out.push(compensator(spec, &ev[..i], prev, e.t)?);
        prev = e.t;
    }
    Ok(out)
}

/// Compensator of the censored interval from the last event (or 0) to the
/// sequence horizon.
pub fn rescaled_tail(spec: &HawkesSpec, seq: &EventSequence) -> Result<f64, HawkesError> {
    let ev = seq.events();
    let last = ev.last().map_or(0.0, |e| e.t);
    compensator(spec, ev, last, seq.horizon().max(last))
}

/// `Σ_i log λ_{k_i}(t_i−) − ∫_0^T Σ_k λ_k(t) dt` for one sequence.
pub fn log_likelihood(spec: &HawkesSpec, seq: &EventSequence) -> Result<f64, HawkesError> {
    let ev = seq.events();
    let mut ll = 0.0;
    for (i, e) in ev.iter().enumerate() {
        ll += intensity_unchecked(spec, &ev[..i], e.t)[e.k].ln();
    }
    Ok(ll - compensator(spec, ev, 0.0, seq.horizon())?)
}

/// Numerical compensator on `[t0, t1]` by the trapezoid rule on a uniform
/// sub-grid of every event-free piece, so kernel jumps fall on grid points.
pub fn trapezoid_compensator(
    spec: &HawkesSpec,
    events: &[Event],
    t0: f64,
    t1: f64,
    points_per_piece: usize,
) -> f64 {
    let mut cuts = vec![t0];
    cuts.extend(events.iter().map(|e| e.t).filter(|&t| t > t0 && t < t1));
    cuts.push(t1);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        // History for the open piece (a, b): events at or before a.
        let n_hist = events.partition_point(|e| e.t <= a);
        let hist = &events[..n_hist];
        let n = points_per_piece.max(2);
        let h = (b - a) / (n - 1) as f64;
        let mut s = 0.0;
        for j in 0..n {
            let t = a + j as f64 * h;
            let v: f64 = intensity_unchecked(spec, hist, t).iter().sum();
            s += if j == 0 || j == n - 1 { 0.5 * v } else { v };
        }
        total += s * h;
    }
    total
}

/// Per-type intensity on a uniform grid over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    pub grid: Vec<f64>,
    /// `values[k][j]` is type `k` at `grid[j]`.
    pub values: Vec<Vec<f64>>,
}

impl IntensityTrace {
    pub fn to_csv(&self, prefix: &str) -> String {
        let mut out = String::from("t");
        for k in 0..self.values.len() {
            out.push_str(&format!(",{prefix}_{k}"));
        }
        out.push('\n');
        for (j, t) in self.grid.iter().enumerate() {
            out.push_str(&t.to_string());
            for row in &self.values {
                out.push(',');
                out.push_str(&row[j].to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = (t1 - t0) / (n - 1) as f64;
    (0..n).map(|j| if j == n - 1 { t1 } else { t0 + j as f64 * h }).collect()
}

pub fn intensity_trace(spec: &HawkesSpec, seq: &EventSequence, resolution: usize) -> IntensityTrace {
    assert!(resolution >= 2, "resolution must be at least 2");
    let grid = uniform_grid(0.0, seq.horizon(), resolution);
    let mut values = vec![Vec::with_capacity(resolution); spec.num_types];
    let ev = seq.events();
    for &t in &grid {
        let n = ev.partition_point(|e| e.t <= t);
        let lam = intensity_unchecked(spec, &ev[..n], t);
        for (k, v) in lam.into_iter().enumerate() {
            values[k].push(v);
        }
    }
    IntensityTrace { grid, values }
}
