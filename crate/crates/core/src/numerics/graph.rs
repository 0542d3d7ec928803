//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape, so the
//! tape order is already topological. [`Graph::backward`] walks it once in
//! reverse. Parameters are borrowed from a [`ParamStore`] without copying.

use std::collections::HashMap;
use std::ops::Deref;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Additive mask value for blocked attention entries. Finite so every
/// activation stays finite; `exp` of it underflows to exactly zero.
pub const MASK_NEG: f64 = -1e30;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTile(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    SpaceToDepth(Var),
    Upsample2x(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    GatherCols { table: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    ScalarLoss { x: Var, grad: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddTile(..) => "add_tile",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::SpaceToDepth(..) => "space_to_depth",
            Op::Upsample2x(..) => "upsample2x",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::StraightThrough(..) => "straight_through",
            Op::ScalarLoss { .. } => "scalar_loss",
        }
    }
}

/// Names accepted by [`Graph::with_backward_fault`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "add_tile",
    "scale",
    "gelu",
    "layer_norm",
    "softmax",
    "cross_entropy",
    "reshape",
    "permute",
    "conv2d",
    "conv_transpose2d",
    "space_to_depth",
    "upsample2x",
    "gather_rows",
    "gather_cols",
    "concat_rows",
    "slice_rows",
    "sum",
    "mean",
    "straight_through",
    "scalar_loss",
];

/// Geometry of a square-kernel 2D convolution over channel-last `[H, W, C]`
/// images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<&'static str>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            fault: None,
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Graph whose parameters do not require gradients; backward buffers are
    /// not retained.
    pub fn inference(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Test hook: flips the sign of the gradient flowing through every op
    /// with the given name during backward.
    pub fn with_backward_fault(mut self, op: Option<&str>) -> Self {
        self.fault = op.and_then(|name| OP_NAMES.iter().copied().find(|n| *n == name));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf tensor that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf tensor that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D product `op(a) · op(b)`; transposed operands are read in place.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg)
    }

    /// Batched product over `[B, ·, ·]` operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let batch = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                ka,
                n,
                &ad[i * m * ka..(i + 1) * m * ka],
                ta,
                &bd[i * ka * n..(i + 1) * ka * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// `x + y` with `y` repeated over the leading extent of `x`
    /// (`y.numel()` must divide `x.numel()` and match its trailing dims).
    pub fn add_tile(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        let (nx, ny) = (self.value(x).numel(), self.value(y).numel());
        let trailing_ok = sy.len() <= sx.len() && sx[sx.len() - sy.len()..] == *sy;
        if ny == 0 || nx % ny != 0 || !trailing_ok {
            return Err(Error::shape("add_tile", sx, sy));
        }
        let yd = self.value(y).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(ny) {
            for (o, &v) in chunk.iter_mut().zip(yd) {
                *o += v;
            }
        }
        let t = Tensor::new(sx, out)?;
        let rg = self.requires(x) || self.requires(y);
        self.push(t, Op::AddTile(x, y), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|v| v * s).collect())?;
        let rg = self.requires(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.requires(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = xd.len() / n;
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * rs * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, rstd }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.requires(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Mean softmax cross-entropy of `[M, N]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let n = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::shape("cross_entropy", s, &[bad]));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(row);
        }
        let loss = total / targets.len().max(1) as f64;
        let rg = self.requires(logits);
        let probs = if rg { probs } else { Vec::new() };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", s, perm));
        }
        let (data, shape) = permute_data(self.value(x).data(), s, perm);
        let rg = self.requires(x);
        self.push(
            Tensor::new(&shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// 2-D convolution of a `[H, W, Cin]` image with a `[k, k, Cin, Cout]`
    /// kernel (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let k = sw[0];
        if sx[0] + 2 * pad < k || sx[1] + 2 * pad < k {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            h: sx[0],
            w: sx[1],
            cin: sx[2],
            cout: sw[3],
            k,
            stride,
            pad,
            ho: (sx[0] + 2 * pad - k) / stride + 1,
            wo: (sx[1] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (m, kk) = (geom.ho * geom.wo, k * k * geom.cin);
        let mut out = vec![0.0; m * geom.cout];
        gemm(m, kk, geom.cout, &cols, false, self.value(w).data(), false, &mut out, false);
        let rg = self.requires(x) || self.requires(w);
        let cols = if self.requires(w) { cols } else { Vec::new() };
        self.push(
            Tensor::new(&[geom.ho, geom.wo, geom.cout], out)?,
            Op::Conv2d { x, w, geom, cols },
            rg,
        )
    }

    /// Transposed 2-D convolution of `[H, W, Cin]` with a `[Cin, k, k, Cout]`
    /// kernel; output extent `(H-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sw[2] || sw[0] != sx[2] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", sx, sw));
        }
        let k = sw[1];
        let full_h = (sx[0] - 1) * stride + k;
        let full_w = (sx[1] - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("conv_transpose2d", sx, sw));
        }
        let geom = ConvGeom {
            h: sx[0],
            w: sx[1],
            cin: sx[2],
            cout: sw[3],
            k,
            stride,
            pad,
            ho: full_h - 2 * pad,
            wo: full_w - 2 * pad,
        };
        let (m, kk) = (geom.h * geom.w, k * k * geom.cout);
        let mut cols = vec![0.0; m * kk];
        gemm(m, geom.cin, kk, self.value(x).data(), false, self.value(w).data(), false, &mut cols, false);
        let out = col2im_transposed(&cols, &geom);
        let rg = self.requires(x) || self.requires(w);
        self.push(
            Tensor::new(&[geom.ho, geom.wo, geom.cout], out)?,
            Op::ConvTranspose2d { x, w, geom },
            rg,
        )
    }

    /// Concatenate each 2×2 spatial window of `[H, W, C]` into `[H/2, W/2, 4C]`,
    /// channel order (row offset, column offset, channel).
    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
            return Err(Error::shape("space_to_depth", s, &[2, 2]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for dh in 0..2 {
                    for dw in 0..2 {
                        let src = ((2 * i + dh) * w + 2 * j + dw) * c;
                        let dst = (i * (w / 2) + j) * 4 * c + (dh * 2 + dw) * c;
                        out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
        let rg = self.requires(x);
        self.push(Tensor::new(&[h / 2, w / 2, 4 * c], out)?, Op::SpaceToDepth(x), rg)
    }

    /// Nearest-neighbour ×2 upsampling of `[H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", s, &[3]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; 4 * xd.len()];
        for i in 0..2 * h {
            for j in 0..2 * w {
                let src = ((i / 2) * w + j / 2) * c;
                let dst = (i * 2 * w + j) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        let rg = self.requires(x);
        self.push(Tensor::new(&[2 * h, 2 * w, c], out)?, Op::Upsample2x(x), rg)
    }

    /// Embedding lookup: rows of a `[N, C]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", s, &[idx.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", s, &[bad]));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let rg = self.requires(table);
        self.push(
            Tensor::new(&[idx.len(), c], out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Column gather from a `[R, N]` table into `[R, idx.len()]`.
    pub fn gather_cols(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather_cols", s, &[idx.len()]));
        }
        let (r, n) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_cols", s, &[bad]));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(r * idx.len());
        for row in 0..r {
            out.extend(idx.iter().map(|&i| td[row * n + i]));
        }
        let rg = self.requires(table);
        self.push(
            Tensor::new(&[r, idx.len()], out)?,
            Op::GatherCols {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&x| self.requires(x));
        self.push(Tensor::new(&shape, data)?, Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape("slice_rows", s, &[start, len]));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let rg = self.requires(x);
        self.push(Tensor::new(&shape, data)?, Op::SliceRows { x, start }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = t.sum() / t.numel().max(1) as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Forward value `quantized`, backward copies the incoming gradient to
    /// `latent` unchanged.
    pub fn straight_through(&mut self, latent: Var, quantized: Tensor) -> Result<Var> {
        if quantized.shape() != self.shape(latent) {
            return Err(Error::shape("straight_through", self.shape(latent), quantized.shape()));
        }
        let rg = self.requires(latent);
        self.push(quantized, Op::StraightThrough(latent), rg)
    }

    /// Scalar node with an externally computed value and gradient w.r.t. `x`.
    pub fn scalar_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("scalar_loss", self.shape(x), grad.shape()));
        }
        let rg = self.requires(x);
        self.push(Tensor::scalar(value), Op::ScalarLoss { x, grad }, rg)
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.name()) {
                let mut flipped = gout.clone();
                flipped.scale_assign(-1.0);
                self.backward_node(i, &flipped, &mut grads)?;
            } else {
                self.backward_node(i, &gout, &mut grads)?;
            }
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of each parameter used on this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(g.data_mut());
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if tb { sb[0] } else { sb[1] };
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |ga| {
                    if ta {
                        gemm(k, n, m, bd, tb, go, true, ga, true);
                    } else {
                        gemm(m, n, k, go, false, bd, !tb, ga, true);
                    }
                });
                self.acc(grads, b, |gb| {
                    if tb {
                        gemm(n, m, k, go, true, ad, ta, gb, true);
                    } else {
                        gemm(k, m, n, ad, !ta, go, false, gb, true);
                    }
                });
            }
            &Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let batch = sa[0];
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if tb { sb[1] } else { sb[2] };
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |ga| {
                    for p in 0..batch {
                        let (gs, bs, ms) = (
                            &mut ga[p * m * k..(p + 1) * m * k],
                            &bd[p * k * n..(p + 1) * k * n],
                            &go[p * m * n..(p + 1) * m * n],
                        );
                        if ta {
                            gemm(k, n, m, bs, tb, ms, true, gs, true);
                        } else {
                            gemm(m, n, k, ms, false, bs, !tb, gs, true);
                        }
                    }
                });
                self.acc(grads, b, |gb| {
                    for p in 0..batch {
                        let (gs, as_, ms) = (
                            &mut gb[p * k * n..(p + 1) * k * n],
                            &ad[p * m * k..(p + 1) * m * k],
                            &go[p * m * n..(p + 1) * m * n],
                        );
                        if tb {
                            gemm(n, m, k, ms, true, as_, ta, gs, true);
                        } else {
                            gemm(k, m, n, as_, !ta, ms, false, gs, true);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| axpy(g, go, 1.0));
                self.acc(grads, b, |g| axpy(g, go, 1.0));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| axpy(g, go, 1.0));
                self.acc(grads, b, |g| axpy(g, go, -1.0));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| {
                    for ((g, &o), &y) in g.iter_mut().zip(go).zip(bd) {
                        *g += o * y;
                    }
                });
                self.acc(grads, b, |g| {
                    for ((g, &o), &x) in g.iter_mut().zip(go).zip(ad) {
                        *g += o * x;
                    }
                });
            }
            &Op::AddTile(x, y) => {
                self.acc(grads, x, |g| axpy(g, go, 1.0));
                self.acc(grads, y, |g| {
                    let ny = g.len();
                    for chunk in go.chunks(ny) {
                        axpy(g, chunk, 1.0);
                    }
                });
            }
            &Op::Scale(x, s) => self.acc(grads, x, |g| axpy(g, go, s)),
            &Op::Gelu(x) => {
                let xd = self.value(x).data();
                self.acc(grads, x, |g| {
                    for ((g, &o), &v) in g.iter_mut().zip(go).zip(xd) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *g += o * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xd = self.value(x).data();
                let gd = self.value(gamma).data();
                let n = gd.len();
                let rows = xd.len() / n;
                let mut xhat = vec![0.0; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    for j in 0..n {
                        xhat[r * n + j] = (row[j] - mean) * rstd[r];
                    }
                }
                self.acc(grads, gamma, |g| {
                    for (idx, (&o, &xh)) in go.iter().zip(&xhat).enumerate() {
                        g[idx % n] += o * xh;
                    }
                });
                self.acc(grads, beta, |g| {
                    for (idx, &o) in go.iter().enumerate() {
                        g[idx % n] += o;
                    }
                });
                self.acc(grads, x, |g| {
                    for r in 0..rows {
                        let (o, xh) = (&go[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let d = o[j] * gd[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let d = o[j] * gd[j];
                            g[r * n + j] += rstd[r] * (d - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let n = self.value(x).last_dim();
                self.acc(grads, x, |g| {
                    for ((gr, yr), or) in g.chunks_mut(n).zip(y.chunks(n)).zip(go.chunks(n)) {
                        let dot: f64 = yr.iter().zip(or).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (or[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).last_dim();
                let s = go[0] / targets.len().max(1) as f64;
                self.acc(grads, *logits, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * n + j] += s * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.acc(grads, x, |g| axpy(g, go, 1.0)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(go, gout.shape(), &inv);
                self.acc(grads, *x, |g| axpy(g, &back, 1.0));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (m, kk) = (geom.ho * geom.wo, geom.k * geom.k * geom.cin);
                self.acc(grads, *w, |g| gemm(kk, m, geom.cout, cols, true, go, false, g, true));
                if self.requires(*x) {
                    let mut dcols = vec![0.0; m * kk];
                    gemm(m, geom.cout, kk, go, false, self.value(*w).data(), true, &mut dcols, false);
                    let dx = col2im(&dcols, geom);
                    self.acc(grads, *x, |g| axpy(g, &dx, 1.0));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (m, kk) = (geom.h * geom.w, geom.k * geom.k * geom.cout);
                let dcols = im2col_transposed(go, geom);
                let xd = self.value(*x).data();
                self.acc(grads, *w, |g| gemm(geom.cin, m, kk, xd, true, &dcols, false, g, true));
                let wd = self.value(*w).data();
                self.acc(grads, *x, |g| gemm(m, kk, geom.cin, &dcols, false, wd, true, g, true));
            }
            &Op::SpaceToDepth(x) => {
                let s = self.shape(x);
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(grads, x, |g| {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            for dh in 0..2 {
                                for dw in 0..2 {
                                    let dst = ((2 * i + dh) * w + 2 * j + dw) * c;
                                    let src = (i * (w / 2) + j) * 4 * c + (dh * 2 + dw) * c;
                                    axpy(&mut g[dst..dst + c], &go[src..src + c], 1.0);
                                }
                            }
                        }
                    }
                });
            }
            &Op::Upsample2x(x) => {
                let s = self.shape(x);
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(grads, x, |g| {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let dst = ((i / 2) * w + j / 2) * c;
                            let src = (i * 2 * w + j) * c;
                            axpy(&mut g[dst..dst + c], &go[src..src + c], 1.0);
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let c = self.value(*table).last_dim();
                self.acc(grads, *table, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut g[i * c..(i + 1) * c], &go[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
            Op::GatherCols { table, idx } => {
                let n = self.value(*table).last_dim();
                let len = idx.len();
                self.acc(grads, *table, |g| {
                    for (r, orow) in go.chunks(len).enumerate() {
                        for (&o, &i) in orow.iter().zip(idx) {
                            g[r * n + i] += o;
                        }
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.acc(grads, x, |g| axpy(g, &go[off..off + n], 1.0));
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let row: usize = self.shape(x)[1..].iter().product();
                self.acc(grads, x, |g| {
                    axpy(&mut g[start * row..start * row + go.len()], go, 1.0)
                });
            }
            &Op::Sum(x) => self.acc(grads, x, |g| g.iter_mut().for_each(|v| *v += go[0])),
            &Op::Mean(x) => {
                let s = go[0] / self.value(x).numel().max(1) as f64;
                self.acc(grads, x, |g| g.iter_mut().for_each(|v| *v += s));
            }
            &Op::StraightThrough(x) => self.acc(grads, x, |g| axpy(g, go, 1.0)),
            Op::ScalarLoss { x, grad } => {
                self.acc(grads, *x, |g| axpy(g, grad.data(), go[0]));
            }
        }
        Ok(())
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    if a == 1.0 {
        for (y, &x) in y.iter_mut().zip(x) {
            *y += x;
        }
    } else {
        for (y, &x) in y.iter_mut().zip(x) {
            *y += a * x;
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    // The innermost output axis is walked in a tight loop.
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut counter = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..total / inner {
        for t in 0..inner {
            out.push(data[base + t * inner_stride]);
        }
        for d in (0..nd - 1).rev() {
            counter[d] += 1;
            base += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cin;
    let mut cols = vec![0.0; g.ho * g.wo * kk];
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let row = &mut cols[(oh * g.wo + ow) * kk..(oh * g.wo + ow + 1) * kk];
            for ki in 0..g.k {
                let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                for kj in 0..g.k {
                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                    if iw < 0 || iw >= g.w as isize {
                        continue;
                    }
                    let src = (ih as usize * g.w + iw as usize) * g.cin;
                    let dst = (ki * g.k + kj) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cin;
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let row = &cols[(oh * g.wo + ow) * kk..(oh * g.wo + ow + 1) * kk];
            for ki in 0..g.k {
                let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                for kj in 0..g.k {
                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                    if iw < 0 || iw >= g.w as isize {
                        continue;
                    }
                    let dst = (ih as usize * g.w + iw as usize) * g.cin;
                    let src = (ki * g.k + kj) * g.cin;
                    axpy(&mut x[dst..dst + g.cin], &row[src..src + g.cin], 1.0);
                }
            }
        }
    }
    x
}

/// Scatter per-input-pixel kernel contributions into the transposed-conv output.
fn col2im_transposed(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cout;
    let mut out = vec![0.0; g.ho * g.wo * g.cout];
    for ih in 0..g.h {
        for iw in 0..g.w {
            let row = &cols[(ih * g.w + iw) * kk..(ih * g.w + iw + 1) * kk];
            for ki in 0..g.k {
                let oh = (ih * g.stride + ki) as isize - g.pad as isize;
                if oh < 0 || oh >= g.ho as isize {
                    continue;
                }
                for kj in 0..g.k {
                    let ow = (iw * g.stride + kj) as isize - g.pad as isize;
                    if ow < 0 || ow >= g.wo as isize {
                        continue;
                    }
                    let dst = (oh as usize * g.wo + ow as usize) * g.cout;
                    let src = (ki * g.k + kj) * g.cout;
                    axpy(&mut out[dst..dst + g.cout], &row[src..src + g.cout], 1.0);
                }
            }
        }
    }
    out
}

fn im2col_transposed(gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cout;
    let mut cols = vec![0.0; g.h * g.w * kk];
    for ih in 0..g.h {
        for iw in 0..g.w {
            let row = &mut cols[(ih * g.w + iw) * kk..(ih * g.w + iw + 1) * kk];
            for ki in 0..g.k {
                let oh = (ih * g.stride + ki) as isize - g.pad as isize;
                if oh < 0 || oh >= g.ho as isize {
                    continue;
                }
                for kj in 0..g.k {
                    let ow = (iw * g.stride + kj) as isize - g.pad as isize;
                    if ow < 0 || ow >= g.wo as isize {
                        continue;
                    }
                    let src = (oh as usize * g.wo + ow as usize) * g.cout;
                    let dst = (ki * g.k + kj) * g.cout;
                    row[dst..dst + g.cout].copy_from_slice(&gout[src..src + g.cout]);
                }
            }
        }
    }
    cols
}
