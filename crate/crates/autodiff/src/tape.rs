//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its output
//! and the ids of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and applies each primitive's vector-Jacobian product. Node order is
//! creation order, so it is always topological.
//!
//! Binary elementwise ops (`add`, `sub`, `mul`) broadcast the right operand
//! when its shape equals the trailing dims of the left operand, or when it
//! holds a single element.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Transpose {
        x: Var,
        ax1: usize,
        ax2: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Expand {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    SegmentSum {
        x: Var,
        ids: Vec<usize>,
    },
    /// Test hook: a VJP that is deliberately wrong by a factor.
    CorruptScale(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of leaf nodes produced by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(|g| g.as_slice())
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
            param_vars: HashMap::new(),
        }
    }

    /// Enables or disables the fail-fast NaN/Inf check on every output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.check_finite && value.data().iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing downstream needs inputs of a constant subgraph.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a stored parameter on the tape. Repeated calls for the same
    /// parameter return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a @ b` (or `a @ bᵀ` with `trans_b`). A 2-D `b` is applied to the
    /// last axis of `a`; otherwise both must share the same leading dims and
    /// the product is batched over them.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", &sa, &sb);
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return shape_err("matmul", &sa, &sb);
        }
        let (batch, m, shared_b) = if sb.len() == 2 {
            (1, sa[..sa.len() - 1].iter().product::<usize>(), true)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return shape_err("matmul", &sa, &sb);
            }
            (
                sa[..sa.len() - 2].iter().product::<usize>(),
                sa[sa.len() - 2],
                false,
            )
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[a, b],
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ax1 >= shape.len() || ax2 >= shape.len() {
            return Err(AutodiffError::Invalid {
                op: "transpose",
                msg: format!("axes ({ax1},{ax2}) for shape {shape:?}"),
            });
        }
        let (out_shape, data) = swap_axes(&shape, self.value(x).data(), ax1, ax2);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Transpose { x, ax1, ax2 },
            &[x],
            "transpose",
        )
    }

    /// Transposes the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return shape_err("transpose", self.shape(x), &[]);
        }
        self.transpose(x, nd - 2, nd - 1)
    }

    // ---------------------------------------------------------------- elementwise

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let nb: usize = sb.iter().product();
        if sa == sb || nb == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(())
        } else {
            shape_err(op, sa, sb)
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let nb = bd.len();
        let mut data = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks(nb) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "add_scalar", Op::AddScalar(x), |v| v + c)
    }

    fn unary(&mut self, x: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[x], name)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", Op::Log(x), f64::ln)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", Op::Softplus(x), softplus)
    }

    /// Identity in the forward pass; the backward pass scales the incoming
    /// gradient by `factor`. Only for exercising the gradient checker.
    #[doc(hidden)]
    pub fn corrupt_vjp(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, "corrupt", Op::CorruptScale(x, factor), |v| v)
    }

    // ---------------------------------------------------------------- structural

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(AutodiffError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err("concat", self.shape(*first), s);
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(xs.to_vec()),
            xs,
            "concat",
        )
    }

    /// Slices `[start, end)` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().unwrap();
        if start >= end || end > w {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} of width {w}"),
            });
        }
        let rows = self.value(x).numel() / w;
        let mut data = Vec::with_capacity(rows * (end - start));
        let xd = self.value(x).data();
        for r in 0..rows {
            data.extend_from_slice(&xd[r * w + start..r * w + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x, start, end },
            &[x],
            "slice",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    /// Inserts a new axis of size `n` at position `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() || n == 0 {
            return Err(AutodiffError::Invalid {
                op: "expand",
                msg: format!("axis {axis} size {n} for shape {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &xd[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = s;
        shape.insert(axis, n);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Expand { x, outer, n, inner },
            &[x],
            "expand",
        )
    }

    /// Gathers rows of a `[V, D]` table; output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return shape_err("embedding", &ts, lead);
        }
        let (v, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    /// Sums entries of a 1-D tensor into `n` buckets by `ids`.
    pub fn segment_sum(&mut self, x: Var, ids: &[usize], n: usize) -> Result<Var> {
        let xd = self.value(x).data();
        if self.shape(x).len() != 1 || ids.len() != xd.len() {
            return shape_err("segment_sum", self.shape(x), &[ids.len()]);
        }
        let mut out = vec![0.0; n];
        for (&v, &id) in xd.iter().zip(ids) {
            if id >= n {
                return Err(AutodiffError::Index {
                    op: "segment_sum",
                    index: id,
                    size: n,
                });
            }
            out[id] += v;
        }
        self.push(
            Tensor::from_parts(vec![n], out),
            Op::SegmentSum {
                x,
                ids: ids.to_vec(),
            },
            &[x],
            "segment_sum",
        )
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return shape_err("masked_fill", xv.shape(), &[mask.len()]);
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
            "masked_fill",
        )
    }

    // ---------------------------------------------------------------- row-wise

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                let d = *v - max;
                // exp underflows to zero below about -745; skip the slow path.
                *v = if d < -745.0 { 0.0 } else { d.exp() };
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Softmax(x), &[x], "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::LogSoftmax(x),
            &[x],
            "log_softmax",
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / w);
        for row in data.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm { x, inv_std },
            &[x],
            "layer_norm",
        )
    }

    /// Inverted dropout: in training, entries survive with probability
    /// `keep_prob` and are scaled by `1/keep_prob`. Identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep_prob: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(AutodiffError::Invalid {
                op: "dropout",
                msg: format!("keep probability {keep_prob}"),
            });
        }
        if mode == Mode::Eval || keep_prob == 1.0 {
            return Ok(x);
        }
        let inv = 1.0 / keep_prob;
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::Dropout { x, scale },
            &[x],
            "dropout",
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let w = v.last_dim();
        let data: Vec<f64> = v.data().chunks(w).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape()[..v.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::from_parts(shape, data), Op::SumLast(x), &[x], "sum_last")
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d`loss` to every node, accumulates parameter gradients into
    /// `store`, and clears the tape. Returns gradients of all leaves that
    /// require grad.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(pid) = node.param {
                    for (a, b) in store.get_mut(pid).grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                out.leaves.insert(Var(i), g);
                continue;
            }
            self.vjp(i, &g, &mut grads);
        }
        self.clear();
        Ok(out)
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let ga = slot(grads, *a, self.value(*a).numel());
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bd[boff..boff + k * n],
                            !*trans_b,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let gb = slot(grads, *b, self.value(*b).numel());
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        let ga_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        if *trans_b {
                            gemm(n, m, k, gc, true, ga_, false, &mut gb[boff..boff + k * n], 1.0);
                        } else {
                            gemm(k, m, n, ga_, true, gc, false, &mut gb[boff..boff + k * n], 1.0);
                        }
                    }
                }
            }
            Op::Transpose { x, ax1, ax2 } => {
                let (_, back) = swap_axes(node.value.shape(), g, *ax1, *ax2);
                add_into(slot(grads, *x, back.len()), &back);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let nb = self.value(*b).numel();
                    let gb = slot(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        for (d, &gv) in gb.iter_mut().zip(chunk) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let nb = bd.len();
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (gac, gc) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((d, &gv), &bv) in gac.iter_mut().zip(gc).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, nb);
                    for (gc, ac) in g.chunks(nb).zip(ad.chunks(nb)) {
                        for ((d, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (a, &gv) in gx.iter_mut().zip(g) {
                    *a += c * gv;
                }
            }
            Op::CorruptScale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (a, &gv) in gx.iter_mut().zip(g) {
                    *a += c * gv;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if self.needs(x) {
                        let gx = slot(grads, x, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            add_into(&mut gx[r * w..(r + 1) * w], src);
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, end } => {
                let w = self.value(*x).last_dim();
                let sw = end - start;
                let rows = g.len() / sw;
                let gx = slot(grads, *x, rows * w);
                for r in 0..rows {
                    add_into(&mut gx[r * w + start..r * w + end], &g[r * sw..(r + 1) * sw]);
                }
            }
            Op::Expand { x, outer, n, inner } => {
                let gx = slot(grads, *x, outer * inner);
                for o in 0..*outer {
                    for j in 0..*n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        add_into(&mut gx[o * inner..(o + 1) * inner], src);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                let gt = slot(grads, *table, self.value(*table).numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::SegmentSum { x, ids } => {
                let gx = slot(grads, *x, ids.len());
                for (a, &id) in gx.iter_mut().zip(ids) {
                    *a += g[id];
                }
            }
            Op::MaskedFill { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for ((a, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *a += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let w = node.value.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(gx.chunks_mut(w)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..w {
                        out[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * sigmoid(xd[j]);
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j];
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] / xd[j];
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    if xd[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let w = node.value.last_dim();
                let gx = slot(grads, *x, g.len());
                for (r, ((gr, yr), out)) in g
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(gx.chunks_mut(w))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        out[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * scale[j];
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g[0] / n as f64;
                slot(grads, *x, n).iter_mut().for_each(|a| *a += gv);
            }
            Op::SumLast(x) => {
                let w = self.value(*x).last_dim();
                let gx = slot(grads, *x, g.len() * w);
                for (r, &gv) in g.iter().enumerate() {
                    gx[r * w..(r + 1) * w].iter_mut().for_each(|a| *a += gv);
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Adds `g` into the gradient slot of `v`, copying when the slot is empty.
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(dst) => add_into(dst, g),
        empty => *empty = Some(g.to_vec()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = op(A) · op(B) + beta·C` for row-major storage, where `A` is logically
/// `[m, k]` and `B` is `[k, n]`. With `a_t`, A is stored as `[k, m]`; with
/// `b_t`, B is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical dims and
    // strides, so every index touched by dgemm is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn swap_axes(shape: &[usize], data: &[f64], ax1: usize, ax2: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    if ax1 == ax2 {
        return (out_shape, data.to_vec());
    }
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax1, ax2);
    // Copy contiguous runs when the last axis is untouched.
    let inner = if ax1 != nd - 1 && ax2 != nd - 1 {
        shape[nd - 1]
    } else {
        1
    };
    let outer_dims = if inner > 1 { nd - 1 } else { nd };
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; outer_dims];
    let total: usize = out_shape[..outer_dims].iter().product();
    for _ in 0..total {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[src..src + inner]);
        for d in (0..outer_dims).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}
