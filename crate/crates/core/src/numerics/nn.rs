//! Layers assembled from graph primitives.

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.weight"), &[din, dout], Init::FanIn(din));
        let b = bias.then(|| store.add(&format!("{name}.bias"), &[dout], Init::Zeros));
        Linear { w, b, din, dout }
    }

    /// Applies to a `[rows, din]` input.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_tile(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: store.add(&format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Extra additive terms for attention scores.
#[derive(Clone, Copy, Default)]
pub struct AttnBias<'a> {
    /// Constant `[T, S]` mask shared by every batch element and head.
    pub mask: Option<&'a Tensor>,
    /// Learned `[heads, R]` table gathered through `index` (`T·S` entries).
    pub table: Option<(ParamId, &'a [usize])>,
}

/// Multi-head scaled dot-product attention. Key projection has no bias: a
/// key bias only shifts every score of a query equally and has zero gradient.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{name}: {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// `query` is `[batch·tq, dim]`, `context` is `[batch·ts, dim]`; returns
    /// `[batch·tq, dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        context: Var,
        batch: usize,
        tq: usize,
        ts: usize,
        bias: AttnBias,
    ) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let q = self.split_heads(g, q, batch, tq)?;
        let k = self.split_heads(g, k, batch, ts)?;
        let v = self.split_heads(g, v, batch, ts)?;
        let out = attention(g, q, k, v, batch, self.heads, bias)?;
        let out = self.merge_heads(g, out, batch, tq)?;
        self.o.forward(g, out)
    }

    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize, t: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        if self.heads == 1 {
            return g.reshape(x, &[batch, t, dh]);
        }
        let x = g.reshape(x, &[batch, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * self.heads, t, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: Var, batch: usize, t: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        if self.heads == 1 {
            return g.reshape(x, &[batch * t, dh]);
        }
        let x = g.reshape(x, &[batch, self.heads, t, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * t, self.dim])
    }
}

/// Scaled dot-product attention over `[batch·heads, T, dh]` queries and
/// `[batch·heads, S, dh]` keys/values with additive bias terms.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    bias: AttnBias,
) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sq[0] != batch * heads {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let (t, s, dh) = (sq[1], sk[1], sq[2]);
    let scores = g.bmm(q, k, false, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some((table, index)) = bias.table {
        if index.len() != t * s {
            return Err(Error::shape("attention", &[t, s], &[index.len()]));
        }
        let table = g.param(table);
        let rel = g.gather_cols(table, index)?;
        let rel = g.reshape(rel, &[heads, t, s])?;
        let sc = g.reshape(scores, &[batch, heads, t, s])?;
        let sc = g.add_tile(sc, rel)?;
        scores = g.reshape(sc, &[batch * heads, t, s])?;
    }
    if let Some(mask) = bias.mask {
        if mask.shape() != [t, s] {
            return Err(Error::shape("attention", &[t, s], mask.shape()));
        }
        let m = g.constant(mask.clone());
        scores = g.add_tile(scores, m)?;
    }
    let attn = g.softmax(scores)?;
    g.bmm(attn, v, false, false)
}

/// Lower-triangular `[t, t]` mask: position τ sees positions ≤ τ.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = super::graph::MASK_NEG;
        }
    }
    m
}

/// `[t, t]` mask letting each position see only itself.
pub fn diagonal_mask(t: usize) -> Tensor {
    let mut m = Tensor::full(&[t, t], super::graph::MASK_NEG);
    for i in 0..t {
        m.data_mut()[i * t + i] = 0.0;
    }
    m
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
/// With `context`, the attention reads keys/values from it (cross-attention).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, t: usize, bias: AttnBias) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, batch, t, t, bias)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, x)
    }

    /// Cross-attention variant; `context` is `[batch·s, dim]` and is used as
    /// given (callers normalize it if needed).
    pub fn forward_cross(
        &self,
        g: &mut Graph,
        x: Var,
        context: Var,
        batch: usize,
        t: usize,
        s: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, context, batch, t, s, AttnBias::default())?;
        let x = g.add(x, a)?;
        self.feed_forward(g, x)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Square-kernel convolution over `[H, W, C]` with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: store.add(&format!("{name}.weight"), &[k, k, cin, cout], Init::FanIn(k * k * cin)),
            b: store.add(&format!("{name}.bias"), &[cout], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        let b = g.param(self.b);
        g.add_tile(y, b)
    }
}

/// Transposed convolution over `[H, W, C]` with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * (k / stride).max(1).pow(2);
        ConvTranspose2d {
            w: store.add(&format!("{name}.weight"), &[cin, k, k, cout], Init::FanIn(fan_in)),
            b: store.add(&format!("{name}.bias"), &[cout], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv_transpose2d(x, w, self.stride, self.pad)?;
        let b = g.param(self.b);
        g.add_tile(y, b)
    }
}
