//! The variational model: inference encoder and Gaussian posterior over a
//! per-position latent `z`, the softplus intensity head, and a generative
//! encoder that reconstructs the next type and gap from `z`.
//!
//! Inputs are shifted right behind a begin-of-sequence token, so position
//! `p` sees events `0..p` exclusive and is responsible for event `p`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tpp_autodiff::{softplus, Checkpoint, Mode, ParamId, ParamStore, Result, Tape, Tensor, Var};

use crate::data::{Batch, EventSequence};
use crate::encoder::{xavier, Encoder, EncoderConfig, EncoderInput};
use crate::rng::{rng_from_seed, TppRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `softplus(β + wᵀz − α·dt)`
    Linear,
    /// `softplus(β + wᵀz + exp(−α·dt))`
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapLikelihood {
    #[default]
    Gaussian,
    LogNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(rename = "J")]
    pub latent_dim: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub gap_likelihood: GapLikelihood,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, latent_dim: usize, encoder: EncoderConfig) -> Self {
        Self {
            variant,
            latent_dim,
            encoder,
            gap_likelihood: GapLikelihood::Gaussian,
            seed: 0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.latent_dim == 0 {
            return Err("latent dimension J must be positive".into());
        }
        self.encoder.validate()
    }
}

/// Intensity parameters in closed form at one position: `lin = β + wᵀz`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub variant: Variant,
    pub lin: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl HeadState {
    /// Per-type intensity `dt` after the last event.
    pub fn rates(&self, dt: f64, out: &mut [f64]) {
        for k in 0..self.lin.len() {
            let arg = match self.variant {
                Variant::Linear => self.lin[k] - self.alpha[k] * dt,
                Variant::Exponential => self.lin[k] + (-self.alpha[k] * dt).exp(),
            };
            out[k] = softplus(arg) + MIN_INTENSITY;
        }
    }
}

/// Floor added to every intensity so it stays strictly positive when the
/// softplus argument underflows.
pub const MIN_INTENSITY: f64 = 1e-12;

/// Scalar intensity for one type, for the definitional examples.
pub fn intensity(variant: Variant, lin: f64, alpha: f64, dt: f64) -> f64 {
    let mut out = [0.0];
    HeadState {
        variant,
        lin: vec![lin],
        alpha: vec![alpha],
    }
    .rates(dt, &mut out);
    out[0]
}

/// Analytic `KL(N(μ, e^{lv}) ‖ N(0, 1))` summed over the given entries.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum()
}

/// Shifted model input built from a batch: position 0 is the BOS token,
/// position `p` carries event `p − 1`.
#[derive(Debug, Clone)]
pub struct ShiftedInput {
    pub rows: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub times: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ShiftedInput {
    /// One position per event; targets are the batch's own events.
    pub fn for_targets(batch: &Batch) -> Self {
        let (b, l, k) = (batch.rows, batch.max_len, batch.num_types);
        let mut ids = vec![k; b * l];
        let mut times = vec![0.0; b * l];
        for r in 0..b {
            ids[r * l] = k + 1;
            for p in 1..batch.lengths[r].min(l) {
                ids[r * l + p] = batch.types[r * l + p - 1];
                times[r * l + p] = batch.times[r * l + p - 1];
            }
        }
        Self {
            rows: b,
            len: l,
            ids,
            times,
            mask: batch.mask.clone(),
        }
    }

    /// `L + 1` positions per sequence: every prefix including the full history.
    pub fn for_histories(seqs: &[&EventSequence], num_types: usize) -> Self {
        let b = seqs.len();
        let l = seqs.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut ids = vec![num_types; b * l];
        let mut times = vec![0.0; b * l];
        let mut mask = vec![false; b * l];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * l] = num_types + 1;
            mask[r * l] = true;
            for (i, e) in s.events().iter().enumerate() {
                ids[r * l + i + 1] = e.k;
                times[r * l + i + 1] = e.t;
                mask[r * l + i + 1] = true;
            }
        }
        Self {
            rows: b,
            len: l,
            ids,
            times,
            mask,
        }
    }

    pub fn as_input(&self) -> EncoderInput<'_> {
        EncoderInput {
            rows: self.rows,
            len: self.len,
            ids: &self.ids,
            times: &self.times,
            mask: &self.mask,
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    mu_w: ParamId,
    mu_b: ParamId,
    lv_w: ParamId,
    lv_b: ParamId,
    w: ParamId,
    beta: ParamId,
    alpha: ParamId,
    z_w: ParamId,
    z_b: ParamId,
    type_w: ParamId,
    type_b: ParamId,
    time_w: ParamId,
    time_b: ParamId,
}

/// Posterior statistics and the latent draw on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Latents {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct Vntpp {
    cfg: ModelConfig,
    num_types: usize,
    pub store: ParamStore,
    inference: Encoder,
    generative: Encoder,
    ids: Ids,
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedModel {
    config: ModelConfig,
    num_types: usize,
    params: Checkpoint,
}

impl Vntpp {
    pub fn new(cfg: ModelConfig, num_types: usize) -> Self {
        assert!(num_types >= 1, "need at least one event type");
        let mut rng = rng_from_seed(cfg.seed);
        let mut store = ParamStore::new();
        let (d, j, k) = (cfg.encoder.d_model, cfg.latent_dim, num_types);
        // Types, padding, begin-of-sequence.
        let vocab = k + 2;
        let inference = Encoder::new(&mut store, "inference", &cfg.encoder, vocab, &mut rng);
        let mu_w = store.add("posterior.mu_w", xavier(&[d, j], &mut rng));
        let mu_b = store.add("posterior.mu_b", Tensor::zeros(&[j]));
        let lv_w = store.add("posterior.logvar_w", xavier(&[d, j], &mut rng));
        let lv_b = store.add("posterior.logvar_b", Tensor::zeros(&[j]));
        let w = store.add("intensity.w", xavier(&[j, k], &mut rng));
        let beta = store.add("intensity.beta", Tensor::zeros(&[k]));
        let alpha = store.add("intensity.alpha", Tensor::full(&[k], 0.1));
        let generative = Encoder::new(&mut store, "generative", &cfg.encoder, vocab, &mut rng);
        let z_w = store.add("generative.z_w", xavier(&[j, d], &mut rng));
        let z_b = store.add("generative.z_b", Tensor::zeros(&[d]));
        let type_w = store.add("generative.type_w", xavier(&[d, k], &mut rng));
        let type_b = store.add("generative.type_b", Tensor::zeros(&[k]));
        let time_w = store.add("generative.time_w", xavier(&[d, 1], &mut rng));
        let time_b = store.add("generative.time_b", Tensor::zeros(&[1]));
        Self {
            cfg,
            num_types,
            store,
            inference,
            generative,
            ids: Ids {
                mu_w,
                mu_b,
                lv_w,
                lv_b,
                w,
                beta,
                alpha,
                z_w,
                z_b,
                type_w,
                type_b,
                time_w,
                time_b,
            },
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let saved = SavedModel {
            config: self.cfg.clone(),
            num_types: self.num_types,
            params: self.store.to_checkpoint(),
        };
        std::fs::write(path, serde_json::to_vec(&saved)?)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let saved: SavedModel =
            serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut model = Vntpp::new(saved.config, saved.num_types);
        model
            .store
            .load_checkpoint(&saved.params)
            .map_err(|e| e.to_string())?;
        Ok(model)
    }

    /// Inference-network posterior at every position of `input`.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        input: &ShiftedInput,
        mode: Mode,
        rng: &mut TppRng,
    ) -> Result<(Var, Var)> {
        let s = &self.store;
        let h = self
            .inference
            .forward(tape, s, &input.as_input(), None, mode, rng)?;
        let mu_w = tape.param(s, self.ids.mu_w);
        let mu_b = tape.param(s, self.ids.mu_b);
        let lv_w = tape.param(s, self.ids.lv_w);
        let lv_b = tape.param(s, self.ids.lv_b);
        let mu = tape.matmul(h, mu_w)?;
        let mu = tape.add(mu, mu_b)?;
        let lv = tape.matmul(h, lv_w)?;
        let lv = tape.add(lv, lv_b)?;
        Ok((mu, lv))
    }

    /// `z = μ + e^{lv/2}·ε` in training, `z = μ` in evaluation.
    pub fn sample_latent(
        &self,
        tape: &mut Tape,
        mu: Var,
        log_var: Var,
        eps: Option<&[f64]>,
        mode: Mode,
    ) -> Result<Var> {
        match (mode, eps) {
            (Mode::Eval, _) | (Mode::Train, None) => Ok(mu),
            (Mode::Train, Some(eps)) => {
                let shape = tape.shape(mu).to_vec();
                let e = tape.constant(Tensor::new(shape, eps.to_vec())?);
                let half = tape.scale(log_var, 0.5)?;
                let sigma = tape.exp(half)?;
                let noise = tape.mul(sigma, e)?;
                tape.add(mu, noise)
            }
        }
    }

    pub fn latents(
        &self,
        tape: &mut Tape,
        input: &ShiftedInput,
        eps: Option<&[f64]>,
        mode: Mode,
        rng: &mut TppRng,
    ) -> Result<Latents> {
        let (mu, log_var) = self.posterior(tape, input, mode, rng)?;
        let z = self.sample_latent(tape, mu, log_var, eps, mode)?;
        Ok(Latents { mu, log_var, z })
    }

    /// `β + zW`, shape `[B, L, K]`.
    pub fn intensity_base(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.ids.w);
        let beta = tape.param(&self.store, self.ids.beta);
        let lin = tape.matmul(z, w)?;
        tape.add(lin, beta)
    }

    /// Intensities `λ_k` for `lin` of shape `[..., K]` at elapsed times `dt`
    /// laid out with the same shape.
    pub fn intensity_at(&self, tape: &mut Tape, lin: Var, dt: Var) -> Result<Var> {
        let alpha = tape.param(&self.store, self.ids.alpha);
        let decay = tape.mul(dt, alpha)?;
        let arg = match self.cfg.variant {
            Variant::Linear => tape.sub(lin, decay)?,
            Variant::Exponential => {
                let neg = tape.scale(decay, -1.0)?;
                let e = tape.exp(neg)?;
                tape.add(lin, e)?
            }
        };
        let sp = tape.softplus(arg)?;
        tape.add_scalar(sp, MIN_INTENSITY)
    }

    /// Generative network: returns next-type log-probabilities `[B, L, K]`
    /// and gap predictions `[B, L, 1]`.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        input: &ShiftedInput,
        z: Var,
        mode: Mode,
        rng: &mut TppRng,
    ) -> Result<(Var, Var)> {
        let s = &self.store;
        let z_w = tape.param(s, self.ids.z_w);
        let z_b = tape.param(s, self.ids.z_b);
        let proj = tape.matmul(z, z_w)?;
        let proj = tape.add(proj, z_b)?;
        let g = self
            .generative
            .forward(tape, s, &input.as_input(), Some(proj), mode, rng)?;
        let type_w = tape.param(s, self.ids.type_w);
        let type_b = tape.param(s, self.ids.type_b);
        let logits = tape.matmul(g, type_w)?;
        let logits = tape.add(logits, type_b)?;
        let log_probs = tape.log_softmax(logits)?;
        let time_w = tape.param(s, self.ids.time_w);
        let time_b = tape.param(s, self.ids.time_b);
        let gap = tape.matmul(g, time_w)?;
        let gap = tape.add(gap, time_b)?;
        Ok((log_probs, gap))
    }

    /// Log-density of observed gaps under the gap head, elementwise.
    pub fn gap_log_density(&self, tape: &mut Tape, pred: Var, gaps: &[f64]) -> Result<Var> {
        let shape = tape.shape(pred).to_vec();
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let (target, offset): (Vec<f64>, Vec<f64>) = match self.cfg.gap_likelihood {
            GapLikelihood::Gaussian => (gaps.to_vec(), vec![-half_log_2pi; gaps.len()]),
            GapLikelihood::LogNormal => gaps
                .iter()
                .map(|&g| {
                    let lg = g.max(1e-10).ln();
                    (lg, -half_log_2pi - lg)
                })
                .unzip(),
        };
        let target = tape.constant(Tensor::new(shape.clone(), target)?);
        let offset = tape.constant(Tensor::new(shape, offset)?);
        let r = tape.sub(pred, target)?;
        let sq = tape.mul(r, r)?;
        let sq = tape.scale(sq, -0.5)?;
        tape.add(sq, offset)
    }

    /// Eval-mode intensity states for every prefix of each sequence:
    /// `out[s][n]` governs the interval after the `n`-th event
    /// (`n = 0` is before the first event).
    pub fn history_states(&self, seqs: &[&EventSequence]) -> Result<Vec<Vec<HeadState>>> {
        let alpha = self.store.value(self.ids.alpha).data().to_vec();
        let k = self.num_types;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(32) {
            let input = ShiftedInput::for_histories(chunk, k);
            let mut tape = Tape::new();
            let mut rng = rng_from_seed(0);
            let (mu, _) = self.posterior(&mut tape, &input, Mode::Eval, &mut rng)?;
            let lin = self.intensity_base(&mut tape, mu)?;
            let lin = tape.value(lin).data();
            for (r, s) in chunk.iter().enumerate() {
                let states = (0..=s.len())
                    .map(|p| {
                        let at = (r * input.len + p) * k;
                        HeadState {
                            variant: self.cfg.variant,
                            lin: lin[at..at + k].to_vec(),
                            alpha: alpha.clone(),
                        }
                    })
                    .collect();
                out.push(states);
            }
        }
        Ok(out)
    }

    /// Eval-mode posterior means at each event's position, paired with the
    /// event's type: row `i` encodes the history before event `i`.
    pub fn latent_means(&self, seqs: &[&EventSequence]) -> Result<Vec<(Vec<f64>, usize)>> {
        let j = self.cfg.latent_dim;
        let mut out = Vec::new();
        for chunk in seqs.chunks(32) {
            let input = ShiftedInput::for_histories(chunk, self.num_types);
            let mut tape = Tape::new();
            let mut rng = rng_from_seed(0);
            let (mu, _) = self.posterior(&mut tape, &input, Mode::Eval, &mut rng)?;
            let mu = tape.value(mu).data();
            for (r, s) in chunk.iter().enumerate() {
                for (i, e) in s.events().iter().enumerate() {
                    let at = (r * input.len + i) * j;
                    out.push((mu[at..at + j].to_vec(), e.k));
                }
            }
        }
        Ok(out)
    }

    /// Draws standard normal noise for `n` latent entries.
    pub fn draw_eps(n: usize, rng: &mut TppRng) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_examples() {
        assert!((intensity(Variant::Linear, 0.0, 0.0, 3.0) - 2f64.ln()).abs() < 1e-11);
        assert!((intensity(Variant::Exponential, 0.0, 1.0, 0.0) - 1.313_261_687_518_222_8).abs() < 1e-11);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0], &[0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let v = kl_divergence(&[0.0], &[2f64.ln()]);
        assert!((v - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn config_json() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"variant":"exponential","J":20,"encoder":{"D":64,"H":4,"d_k":16,"n_layers":2,"dropout":0.1},"seed":3}"#,
        )
        .unwrap();
        assert_eq!(c.variant, Variant::Exponential);
        assert_eq!(c.latent_dim, 20);
        assert_eq!(c.seed, 3);
    }
}
