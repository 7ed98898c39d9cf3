//! Training objective and optimization loop.
//!
//! Per sequence the objective is
//! `recon − kl + Σ_i log λ_{k_i}(t_i) − ∫_{t_1}^{t_L} λ(t) dt`; the loss is its
//! negative averaged over the sequences of a batch. The integral is a Monte
//! Carlo estimate with `M` uniform draws per inter-event interval.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tpp_autodiff::{AdamConfig, AdamState, AutodiffError, Checkpoint, Mode, Tape, Tensor, Var};

use crate::data::{Batch, Dataset, EventSequence};
use crate::model::{ShiftedInput, Vntpp};
use crate::rng::{derive_seed, rng_from_seed, TppRng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numeric failure in epoch {epoch}, batch {batch}: {source}")]
    Numeric {
        epoch: usize,
        batch: usize,
        #[source]
        source: AutodiffError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

/// Per-sequence averages of the objective terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub event_ll: f64,
    pub comp: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.recon += weight * other.recon;
        self.kl += weight * other.kl;
        self.event_ll += weight * other.event_ll;
        self.comp += weight * other.comp;
        self.total += weight * other.total;
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `Σ_i (t_{i+1} − t_i) · mean_m λ(t_i + u_m (t_{i+1} − t_i))` over the event
/// span of `times`. `rate(i, t)` is the total intensity at `t` in the
/// interval following event `i`. Requires `m ≥ 2` for a finite standard
/// error.
pub fn mc_compensator(
    times: &[f64],
    m: usize,
    rng: &mut TppRng,
    mut rate: impl FnMut(usize, f64) -> f64,
) -> McEstimate {
    assert!(m >= 1, "need at least one sample per interval");
    let mut value = 0.0;
    let mut var = 0.0;
    for i in 0..times.len().saturating_sub(1) {
        let dt = times[i + 1] - times[i];
        let draws: Vec<f64> = (0..m)
            .map(|_| rate(i, times[i] + rng.gen::<f64>() * dt))
            .collect();
        let mean = draws.iter().sum::<f64>() / m as f64;
        value += dt * mean;
        if m > 1 {
            let s2 = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            var += dt * dt * s2 / m as f64;
        } else {
            var = f64::NAN;
        }
    }
    McEstimate {
        value,
        std_error: var.sqrt(),
    }
}

/// Exogenous randomness of one loss evaluation: latent noise `[B, L, J]` and
/// compensator abscissae `[B, L, M]` in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossNoise {
    pub eps: Vec<f64>,
    pub u: Vec<f64>,
}

impl LossNoise {
    pub fn draw(batch: &Batch, latent_dim: usize, mc_samples: usize, rng: &mut TppRng) -> Self {
        let cells = batch.rows * batch.max_len;
        Self {
            eps: Vntpp::draw_eps(cells * latent_dim, rng),
            u: (0..cells * mc_samples).map(|_| rng.gen::<f64>()).collect(),
        }
    }
}

/// Builds the loss on `tape`. Noise is drawn from `rng` unless supplied;
/// dropout draws from `rng` afterwards.
pub fn elbo_loss(
    model: &Vntpp,
    tape: &mut Tape,
    batch: &Batch,
    mc_samples: usize,
    noise: Option<&LossNoise>,
    mode: Mode,
    rng: &mut TppRng,
) -> Result<(Var, LossBreakdown), AutodiffError> {
    let (b, l, k) = (batch.rows, batch.max_len, batch.num_types);
    let (j, m) = (model.latent_dim(), mc_samples);
    let drawn;
    let noise = match noise {
        Some(n) => n,
        None => {
            drawn = LossNoise::draw(batch, j, m, rng);
            &drawn
        }
    };
    let input = ShiftedInput::for_targets(batch);
    let lat = model.latents(tape, &input, Some(&noise.eps), mode, rng)?;
    let lin = model.intensity_base(tape, lat.z)?;

    // Gap of every target from its predecessor (or from 0 for the first).
    let mut gaps = vec![0.0; b * l];
    for r in 0..b {
        for p in 0..batch.lengths[r] {
            let prev = if p == 0 { 0.0 } else { batch.times[r * l + p - 1] };
            gaps[r * l + p] = batch.times[r * l + p] - prev;
        }
    }

    // Event log-intensities.
    let dt_k: Vec<f64> = gaps.iter().flat_map(|&g| std::iter::repeat_n(g, k)).collect();
    let dt_k = tape.constant(Tensor::new(vec![b, l, k], dt_k)?);
    let lam = model.intensity_at(tape, lin, dt_k)?;
    let log_lam = tape.log(lam)?;
    let mut onehot = vec![0.0; b * l * k];
    for (i, (&t, &real)) in batch.types.iter().zip(&batch.mask).enumerate() {
        if real {
            onehot[i * k + t] = 1.0;
        }
    }
    let onehot = tape.constant(Tensor::new(vec![b, l, k], onehot)?);
    let picked = tape.mul(log_lam, onehot)?;
    let event_ll = tape.sum(picked)?;

    // Compensator over intervals following the first event.
    let mut s = Vec::with_capacity(b * l * m * k);
    let mut w = Vec::with_capacity(b * l * m * k);
    for r in 0..b {
        for p in 0..l {
            let i = r * l + p;
            let in_span = p >= 1 && batch.mask[i];
            for mm in 0..m {
                let at = noise.u[i * m + mm] * gaps[i];
                let weight = if in_span { gaps[i] / m as f64 } else { 0.0 };
                for _ in 0..k {
                    s.push(at);
                    w.push(weight);
                }
            }
        }
    }
    let s = tape.constant(Tensor::new(vec![b, l, m, k], s)?);
    let w = tape.constant(Tensor::new(vec![b, l, m, k], w)?);
    let lin_mc = tape.expand(lin, 2, m)?;
    let lam_mc = model.intensity_at(tape, lin_mc, s)?;
    let weighted = tape.mul(lam_mc, w)?;
    let comp = tape.sum(weighted)?;

    // Analytic KL against the standard normal prior.
    let mask_j: Vec<f64> = batch
        .mask
        .iter()
        .flat_map(|&r| std::iter::repeat_n(if r { 1.0 } else { 0.0 }, j))
        .collect();
    let mask_j = tape.constant(Tensor::new(vec![b, l, j], mask_j)?);
    let var = tape.exp(lat.log_var)?;
    let mu2 = tape.mul(lat.mu, lat.mu)?;
    let t = tape.add_scalar(lat.log_var, 1.0)?;
    let t = tape.sub(t, mu2)?;
    let t = tape.sub(t, var)?;
    let t = tape.mul(t, mask_j)?;
    let t = tape.sum(t)?;
    let kl = tape.scale(t, -0.5)?;

    // Reconstruction of the next type and gap.
    let (log_probs, gap_pred) = model.reconstruct(tape, &input, lat.z, mode, rng)?;
    let type_ll = tape.mul(log_probs, onehot)?;
    let type_ll = tape.sum(type_ll)?;
    let gap_ll = model.gap_log_density(tape, gap_pred, &gaps)?;
    let mask_1: Vec<f64> = batch.mask.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let mask_1 = tape.constant(Tensor::new(vec![b, l, 1], mask_1)?);
    let gap_ll = tape.mul(gap_ll, mask_1)?;
    let gap_ll = tape.sum(gap_ll)?;
    let recon = tape.add(type_ll, gap_ll)?;

    let obj = tape.sub(recon, kl)?;
    let obj = tape.add(obj, event_ll)?;
    let obj = tape.sub(obj, comp)?;
    let loss = tape.scale(obj, -1.0 / b as f64)?;

    let v = |tape: &Tape, x: Var| tape.value(x).item() / b as f64;
    let breakdown = LossBreakdown {
        recon: v(tape, recon),
        kl: v(tape, kl),
        event_ll: v(tape, event_ll),
        comp: v(tape, comp),
        total: tape.value(loss).item(),
    };
    Ok((loss, breakdown))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Fail fast on NaN/Inf in every tape operation.
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            learning_rate: 5e-4,
            mc_samples: 20,
            grad_clip_norm: 5.0,
            seed: 0,
            check_finite: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size and mc_samples must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(TrainError::Config(
                "learning_rate and grad_clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub wall_ms: u64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub params: Checkpoint,
    pub adam: AdamState,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<Checkpoint>,
    pub history: Vec<EpochLog>,
}

/// Fixed length-sorted buckets of sequence indices.
fn buckets(data: &Dataset, batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by_key(|&i| data.sequences[i].len());
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn make_batch(data: &Dataset, idx: &[usize]) -> Batch {
    let refs: Vec<&EventSequence> = idx.iter().map(|&i| &data.sequences[i]).collect();
    Batch::from_sequences(&refs, data.num_types)
}

/// Eval-mode loss averaged over sequences, with fixed compensator draws.
pub fn evaluate_loss(
    model: &Vntpp,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, AutodiffError> {
    let mut total = LossBreakdown::default();
    let n = data.len() as f64;
    for (bi, idx) in buckets(data, cfg.batch_size).iter().enumerate() {
        let batch = make_batch(data, idx);
        let mut rng = rng_from_seed(derive_seed(&[cfg.seed, u64::MAX, bi as u64]));
        let mut tape = Tape::new().with_finite_check(cfg.check_finite);
        let (_, br) = elbo_loss(model, &mut tape, &batch, cfg.mc_samples, None, Mode::Eval, &mut rng)?;
        total.accumulate(&br, batch.rows as f64 / n);
    }
    Ok(total)
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(
    model: &mut Vntpp,
    adam: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut TppRng,
) -> Result<LossBreakdown, AutodiffError> {
    let mut tape = Tape::new().with_finite_check(cfg.check_finite);
    let (loss, br) = elbo_loss(model, &mut tape, batch, cfg.mc_samples, None, Mode::Train, rng)?;
    if !br.total.is_finite() {
        return Err(AutodiffError::NonFinite { op: "loss" });
    }
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    model.store.clip_grad_norm(cfg.grad_clip_norm);
    adam.step(&mut model.store);
    Ok(br)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
}

/// Trains `model` with Adam for `cfg.epochs` epochs (continuing from
/// `resume` if given). Sequences with fewer than two events are skipped.
/// After training the model holds the parameters with the best validation
/// loss (or the final ones without a validation set). `on_epoch` sees each
/// epoch's log and the resumable state.
pub fn train(
    model: &mut Vntpp,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_set = train_set.trainable();
    if train_set.is_empty() {
        return Err(TrainError::Data("no trainable sequences (need length >= 2)".into()));
    }
    if train_set.num_types != model.num_types() {
        return Err(TrainError::Data(format!(
            "dataset has {} types but the model expects {}",
            train_set.num_types,
            model.num_types()
        )));
    }
    let val_set = val_set.map(|v| v.trainable()).filter(|v| !v.is_empty());

    let mut state = match resume {
        Some(s) => {
            model
                .store
                .load_checkpoint(&s.params)
                .map_err(|e| TrainError::Config(format!("resume: {e}")))?;
            s.adam
                .check_compatible(&model.store)
                .map_err(|e| TrainError::Config(format!("resume: {e}")))?;
            s
        }
        None => TrainState {
            epochs_done: 0,
            params: model.store.to_checkpoint(),
            adam: AdamState::new(&model.store, AdamConfig::with_lr(cfg.learning_rate)),
            best_val: None,
            best_epoch: None,
            best_params: None,
            history: Vec::new(),
        },
    };

    let groups = buckets(&train_set, cfg.batch_size);
    let n = train_set.len() as f64;
    for epoch in state.epochs_done + 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(&[cfg.seed, epoch as u64])));
        let mut epoch_loss = LossBreakdown::default();
        for (bi, &g) in order.iter().enumerate() {
            let batch = make_batch(&train_set, &groups[g]);
            let mut rng = rng_from_seed(derive_seed(&[cfg.seed, epoch as u64, bi as u64]));
            let br = train_step(model, &mut state.adam, &batch, cfg, &mut rng)
                .map_err(|source| TrainError::Numeric { epoch, batch: bi, source })?;
            epoch_loss.accumulate(&br, batch.rows as f64 / n);
        }
        let val = match &val_set {
            Some(v) => Some(
                evaluate_loss(model, v, cfg)
                    .map_err(|source| TrainError::Numeric { epoch, batch: 0, source })?,
            ),
            None => None,
        };
        if let Some(v) = val {
            if state.best_val.is_none_or(|b| v.total < b) {
                state.best_val = Some(v.total);
                state.best_epoch = Some(epoch);
                state.best_params = Some(model.store.to_checkpoint());
            }
        }
        let log = EpochLog {
            epoch,
            train: epoch_loss,
            val,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {}",
            log.train.total,
            val.map_or("-".to_string(), |v| format!("{:.4}", v.total))
        );
        state.epochs_done = epoch;
        state.params = model.store.to_checkpoint();
        state.history.push(log.clone());
        on_epoch(&log, &state);
    }
    if let Some(best) = &state.best_params {
        model
            .store
            .load_checkpoint(best)
            .map_err(|e| TrainError::Config(e.to_string()))?;
    }
    Ok(TrainOutcome { state })
}
