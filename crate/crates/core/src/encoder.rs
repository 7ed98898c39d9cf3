//! Causal Transformer encoder: event embedding plus temporal encoding,
//! followed by post-norm blocks of masked multi-head self-attention and a
//! position-wise feed-forward network.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tpp_autodiff::{Mode, ParamId, ParamStore, Result, Tape, Tensor, Var};

use crate::rng::TppRng;

const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(rename = "D")]
    pub d_model: usize,
    #[serde(rename = "H")]
    pub n_heads: usize,
    pub d_k: usize,
    /// Defaults to `d_k`.
    #[serde(default)]
    pub d_v: Option<usize>,
    pub n_layers: usize,
    pub dropout: f64,
    /// Defaults to `4·D`.
    #[serde(default)]
    pub d_ff: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: None,
            n_layers: 2,
            dropout: 0.1,
            d_ff: None,
        }
    }
}

impl EncoderConfig {
    pub fn d_v(&self) -> usize {
        self.d_v.unwrap_or(self.d_k)
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_k == 0 || self.d_v() == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        if self.n_layers == 0 || self.d_ff() == 0 {
            return Err("encoder needs at least one layer and a positive d_ff".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a timestamp: `sin(t / 10000^{l/D})` at even `l`,
/// `cos(t / 10000^{(l-1)/D})` at odd `l`.
pub fn temporal_encoding(t: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    write_temporal_encoding(t, &mut out);
    out
}

fn write_temporal_encoding(t: f64, out: &mut [f64]) {
    let d = out.len() as f64;
    for (l, v) in out.iter_mut().enumerate() {
        let even = l - l % 2;
        let arg = t / 10000f64.powf(even as f64 / d);
        *v = if l % 2 == 0 { arg.sin() } else { arg.cos() };
    }
}

/// Uniform in `±sqrt(6/(fan_in + fan_out))`.
pub fn xavier(shape: &[usize], rng: &mut TppRng) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone)]
struct Layer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Embedded and masked input for one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    pub rows: usize,
    pub len: usize,
    /// Embedding row per position, `rows·len` entries.
    pub ids: &'a [usize],
    /// Timestamp per position.
    pub times: &'a [f64],
    /// True at real positions; a contiguous prefix of each row.
    pub mask: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    embedding: ParamId,
    layers: Vec<Layer>,
}

impl Encoder {
    /// Registers parameters under `prefix` for a vocabulary of `vocab` rows.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        vocab: usize,
        rng: &mut TppRng,
    ) -> Self {
        let d = cfg.d_model;
        let (h, dk, dv, dff) = (cfg.n_heads, cfg.d_k, cfg.d_v(), cfg.d_ff());
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let emb: Vec<f64> = (0..vocab * d).map(|_| normal.sample(rng)).collect();
        let embedding = store.add(
            format!("{prefix}.embedding"),
            Tensor::new(vec![vocab, d], emb).expect("shape"),
        );
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.layer{i}.{name}"), t);
                Layer {
                    wq: add("wq", xavier(&[d, h * dk], rng)),
                    wk: add("wk", xavier(&[d, h * dk], rng)),
                    wv: add("wv", xavier(&[d, h * dv], rng)),
                    wo: add("wo", xavier(&[h * dv, d], rng)),
                    ln1_g: add("ln1_gamma", Tensor::full(&[d], 1.0)),
                    ln1_b: add("ln1_beta", Tensor::zeros(&[d])),
                    w1: add("ffn_w1", xavier(&[d, dff], rng)),
                    b1: add("ffn_b1", Tensor::zeros(&[dff])),
                    w2: add("ffn_w2", xavier(&[dff, d], rng)),
                    b2: add("ffn_b2", Tensor::zeros(&[d])),
                    ln2_g: add("ln2_gamma", Tensor::full(&[d], 1.0)),
                    ln2_b: add("ln2_beta", Tensor::zeros(&[d])),
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            embedding,
            layers,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `U[id] + PE(t)` per position, shape `[B, L, D]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &EncoderInput) -> Result<Var> {
        let d = self.cfg.d_model;
        let lead = [input.rows, input.len];
        let table = tape.param(store, self.embedding);
        let emb = tape.embedding(table, input.ids, &lead)?;
        let mut pe = vec![0.0; input.times.len() * d];
        for (row, &t) in pe.chunks_mut(d).zip(input.times) {
            write_temporal_encoding(t, row);
        }
        let pe = tape.constant(Tensor::new(vec![input.rows, input.len, d], pe)?);
        tape.add(emb, pe)
    }

    /// Runs the full stack. `extra`, if given, is added to the embedded input.
    /// Output rows at padded positions are zero.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &EncoderInput,
        extra: Option<Var>,
        mode: Mode,
        rng: &mut TppRng,
    ) -> Result<Var> {
        let mut x = self.embed(tape, store, input)?;
        if let Some(e) = extra {
            x = tape.add(x, e)?;
        }
        let attn_mask = attention_mask(input, self.cfg.n_heads);
        let keep = 1.0 - self.cfg.dropout;
        for layer in &self.layers {
            let a = self.attention(tape, store, layer, x, input, &attn_mask)?;
            let a = tape.dropout(a, keep, mode, rng)?;
            let r = tape.add(x, a)?;
            x = affine_norm(tape, store, r, layer.ln1_g, layer.ln1_b)?;

            let w1 = tape.param(store, layer.w1);
            let b1 = tape.param(store, layer.b1);
            let w2 = tape.param(store, layer.w2);
            let b2 = tape.param(store, layer.b2);
            let f = tape.matmul(x, w1)?;
            let f = tape.add(f, b1)?;
            let f = tape.relu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add(f, b2)?;
            let f = tape.dropout(f, keep, mode, rng)?;
            let r = tape.add(x, f)?;
            x = affine_norm(tape, store, r, layer.ln2_g, layer.ln2_b)?;
        }
        let d = self.cfg.d_model;
        let pad: Vec<bool> = input
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(!m, d))
            .collect();
        tape.masked_fill(x, &pad, 0.0)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &Layer,
        x: Var,
        input: &EncoderInput,
        mask: &[bool],
    ) -> Result<Var> {
        let (b, l) = (input.rows, input.len);
        let (h, dk, dv) = (self.cfg.n_heads, self.cfg.d_k, self.cfg.d_v());
        let split = |tape: &mut Tape, w: ParamId, width: usize| -> Result<Var> {
            let w = tape.param(store, w);
            let p = tape.matmul(x, w)?;
            let p = tape.reshape(p, &[b, l, h, width])?;
            tape.transpose(p, 1, 2)
        };
        let q = split(tape, layer.wq, dk)?;
        let k = split(tape, layer.wk, dk)?;
        let v = split(tape, layer.wv, dv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let scores = tape.masked_fill(scores, mask, MASK_VALUE)?;
        let weights = tape.softmax(scores)?;
        let heads = tape.matmul(weights, v)?;
        let heads = tape.transpose(heads, 1, 2)?;
        let heads = tape.reshape(heads, &[b, l, h * dv])?;
        let wo = tape.param(store, layer.wo);
        tape.matmul(heads, wo)
    }
}

fn affine_norm(tape: &mut Tape, store: &ParamStore, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    let n = tape.mul(n, g)?;
    tape.add(n, b)
}

/// `[B, H, L, L]` mask, true where query `i` may not see key `j`: `j > i`
/// or key `j` is padding.
fn attention_mask(input: &EncoderInput, heads: usize) -> Vec<bool> {
    let (b, l) = (input.rows, input.len);
    let mut out = Vec::with_capacity(b * heads * l * l);
    for r in 0..b {
        let row_mask = &input.mask[r * l..(r + 1) * l];
        for _ in 0..heads {
            for i in 0..l {
                for (j, &real) in row_mask.iter().enumerate() {
                    out.push(j > i || !real);
                }
            }
        }
    }
    out
}
