//! Spatial-temporal generative transformer over scene tokens.
//!
//! Each frame's tokens (codebook embeddings) form a pyramid of scales by
//! repeated 2×2 merging; an ego token joins every scale's spatial mixing.
//! Per scale, each site's token history runs through a causal temporal
//! stack whose output at position τ predicts frame τ+1. Predictions are
//! fused coarse-to-fine into base-scale code logits, and the ego token is
//! decoded into the next displacement.

mod check;
mod rollout;
mod train;

#[cfg(test)]
mod tests;

pub use check::{grad_check_tiny_world, tiny_world_model};
pub use rollout::{rollout, rollout_tokens, Rollout};
pub use train::{evaluate_world, train_world, TokenizedSequence, TrainedWorld, WorldEval};

use std::fmt;

pub use crate::evalkit::Trajectory;

use crate::config::{format_dims, parse_dims, read_bool, read_key, ConfigMap};
use crate::error::{Error, Result};
use crate::numerics::nn::{causal_mask, diagonal_mask, AttnBias, Conv2d, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::numerics::{Checkpoint, DType, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::occgrid::EgoPose;

/// Next-token decoding rule at rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Argmax,
    /// Sample from `softmax(logits / temperature)`.
    Sample(f64),
}

impl Decoding {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "argmax" {
            return Ok(Decoding::Argmax);
        }
        if let Some(t) = s.strip_prefix("sample:") {
            if let Ok(t) = t.parse::<f64>() {
                if t > 0.0 && t.is_finite() {
                    return Ok(Decoding::Sample(t));
                }
            }
        }
        Err(Error::config(format!("world.decoding must be argmax or sample:<temperature>, got {s:?}")))
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoding::Argmax => write!(f, "argmax"),
            Decoding::Sample(t) => write!(f, "sample:{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Number of merges; the pyramid has `k + 1` scales.
    pub k: usize,
    pub layers_per_scale: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lambda2: f64,
    /// Past frames `t`; the context window holds `t + 1` frames.
    pub history_frames: usize,
    pub future_frames: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub eval_every: usize,
    pub eval_windows: usize,
    pub seed: u64,
    pub decoding: Decoding,
    /// Ablation switches: when off, the corresponding attention only lets a
    /// token attend to itself.
    pub spatial_attn: bool,
    pub temporal_attn: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            k: 2,
            layers_per_scale: 6,
            heads: 4,
            mlp_ratio: 2,
            lambda2: 1.0,
            history_frames: 4,
            future_frames: 6,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            steps: 2000,
            batch: 4,
            clip: 5.0,
            eval_every: 200,
            eval_windows: 32,
            seed: 0,
            decoding: Decoding::Argmax,
            spatial_attn: true,
            temporal_attn: true,
        }
    }
}

impl WorldConfig {
    pub const KEYS: &'static [&'static str] = &[
        "world.K",
        "world.layers_per_scale",
        "world.heads",
        "world.mlp_ratio",
        "world.lambda2",
        "world.history_frames",
        "world.future_frames",
        "world.lr",
        "world.lr_min",
        "world.weight_decay",
        "world.steps",
        "world.batch",
        "world.clip",
        "world.eval_every",
        "world.eval_windows",
        "world.seed",
        "world.decoding",
        "world.spatial_attn",
        "world.temporal_attn",
    ];

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut c = WorldConfig::default();
        c.apply(map)?;
        Ok(c)
    }

    pub fn apply(&mut self, map: &ConfigMap) -> Result<()> {
        read_key(map, "world.K", &mut self.k)?;
        read_key(map, "world.layers_per_scale", &mut self.layers_per_scale)?;
        read_key(map, "world.heads", &mut self.heads)?;
        read_key(map, "world.mlp_ratio", &mut self.mlp_ratio)?;
        read_key(map, "world.lambda2", &mut self.lambda2)?;
        read_key(map, "world.history_frames", &mut self.history_frames)?;
        read_key(map, "world.future_frames", &mut self.future_frames)?;
        read_key(map, "world.lr", &mut self.lr)?;
        read_key(map, "world.lr_min", &mut self.lr_min)?;
        read_key(map, "world.weight_decay", &mut self.weight_decay)?;
        read_key(map, "world.steps", &mut self.steps)?;
        read_key(map, "world.batch", &mut self.batch)?;
        read_key(map, "world.clip", &mut self.clip)?;
        read_key(map, "world.eval_every", &mut self.eval_every)?;
        read_key(map, "world.eval_windows", &mut self.eval_windows)?;
        read_key(map, "world.seed", &mut self.seed)?;
        if let Some(d) = map.get("world.decoding") {
            self.decoding = Decoding::parse(d)?;
        }
        read_bool(map, "world.spatial_attn", &mut self.spatial_attn)?;
        read_bool(map, "world.temporal_attn", &mut self.temporal_attn)?;
        self.validate()
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("world.K", self.k.to_string());
        put("world.layers_per_scale", self.layers_per_scale.to_string());
        put("world.heads", self.heads.to_string());
        put("world.mlp_ratio", self.mlp_ratio.to_string());
        put("world.lambda2", self.lambda2.to_string());
        put("world.history_frames", self.history_frames.to_string());
        put("world.future_frames", self.future_frames.to_string());
        put("world.lr", self.lr.to_string());
        put("world.lr_min", self.lr_min.to_string());
        put("world.weight_decay", self.weight_decay.to_string());
        put("world.steps", self.steps.to_string());
        put("world.batch", self.batch.to_string());
        put("world.clip", self.clip.to_string());
        put("world.eval_every", self.eval_every.to_string());
        put("world.eval_windows", self.eval_windows.to_string());
        put("world.seed", self.seed.to_string());
        put("world.decoding", self.decoding.to_string());
        put("world.spatial_attn", self.spatial_attn.to_string());
        put("world.temporal_attn", self.temporal_attn.to_string());
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("world.heads and world.mlp_ratio must be >= 1"));
        }
        if self.future_frames == 0 {
            return Err(Error::config("world.future_frames must be >= 1"));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::config("world.lr must be > 0 and world.batch >= 1"));
        }
        if !(self.lambda2 >= 0.0) || !(self.clip >= 0.0) {
            return Err(Error::config("world.lambda2 and world.clip must be >= 0"));
        }
        Ok(())
    }

    /// Context window length `t + 1`.
    pub fn window(&self) -> usize {
        self.history_frames + 1
    }

    /// Rows of the temporal position table.
    pub fn max_positions(&self) -> usize {
        self.history_frames + 1 + self.future_frames
    }
}

/// Shapes inherited from the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldDims {
    pub token_hw: [usize; 2],
    /// Token channels `C`.
    pub dim: usize,
    /// Codebook size `N`.
    pub codes: usize,
}

impl WorldDims {
    pub fn from_tokenizer(tok: &crate::tokenizer::Tokenizer) -> Self {
        WorldDims {
            token_hw: tok.config.token_hw(),
            dim: tok.config.latent_channels,
            codes: tok.config.codebook_size,
        }
    }
}

/// Token grids per scale, frame-major `[T, M_i, C]`, plus the ego tokens `[T, C]`.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub scales: Vec<Var>,
    pub ego: Var,
}

/// Teacher-forced outputs for a window of `T` frames.
#[derive(Clone, Copy, Debug)]
pub struct WorldOutput {
    /// `[T·M₀, N]`; rows of position τ predict frame τ+1.
    pub logits: Var,
    /// `[T, 2]` predicted displacement from frame τ to τ+1, meters.
    pub ego: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldLossBreakdown {
    pub codes: f64,
    /// Already weighted by λ2.
    pub ego: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldConfig,
    pub dims: WorldDims,
    pub params: ParamStore,
    ego_embed: Mlp,
    spatial_pos: Vec<ParamId>,
    spatial_bias: Vec<ParamId>,
    spatial: Vec<TransformerBlock>,
    merge: Vec<Linear>,
    temporal_pos: ParamId,
    temporal: Vec<Vec<TransformerBlock>>,
    ego_ctx_ln: LayerNorm,
    ego_cross: Vec<TransformerBlock>,
    ego_temporal: Vec<TransformerBlock>,
    fuse: Vec<Conv2d>,
    final_mix: TransformerBlock,
    final_bias: ParamId,
    head_ln: LayerNorm,
    head: Linear,
    ego_ln: LayerNorm,
    ego_head: Mlp,
    bias_index: Vec<Vec<usize>>,
    final_index: Vec<usize>,
}

const EGO_LAYERS: usize = 2;

/// Relative-offset index for every (query, key) pair of an `h × w` grid,
/// optionally followed by one extra token whose pairs share the last entry.
fn relative_index(h: usize, w: usize, extra: bool) -> (Vec<usize>, usize) {
    let span = (2 * w - 1) * (2 * h - 1);
    let m = h * w;
    let n = m + extra as usize;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            if q == m || k == m {
                idx.push(span);
            } else {
                let dh = (q / w) as isize - (k / w) as isize + h as isize - 1;
                let dw = (q % w) as isize - (k % w) as isize + w as isize - 1;
                idx.push(dh as usize * (2 * w - 1) + dw as usize);
            }
        }
    }
    (idx, span + 1)
}

/// `(Δx, Δy, Δyaw)` of each pose relative to its predecessor; zeros for the first.
pub fn ego_displacements(poses: &[EgoPose]) -> Tensor {
    let mut data = vec![0.0; 3 * poses.len()];
    for (i, pair) in poses.windows(2).enumerate() {
        let (dx, dy, dyaw) = pair[0].relative(&pair[1]);
        data[3 * (i + 1)..3 * (i + 2)].copy_from_slice(&[dx, dy, dyaw]);
    }
    Tensor::new(&[poses.len(), 3], data).expect("consistent shape")
}

impl WorldModel {
    pub fn new(config: WorldConfig, dims: WorldDims) -> Result<Self> {
        config.validate()?;
        let c = dims.dim;
        let [h, w] = dims.token_hw;
        let f = 1usize << config.k;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape("world pyramid", &[h, w], &[f, f]));
        }
        if c == 0 || !c.is_multiple_of(config.heads) || dims.codes < 2 {
            return Err(Error::config(format!(
                "token dim {c} must be a positive multiple of world.heads={} and N >= 2",
                config.heads
            )));
        }
        let mut p = ParamStore::new(config.seed);
        let heads = config.heads;
        let ego_embed = Mlp::new(&mut p, "world.ego.embed", 3, c, c);
        let (mut spatial_pos, mut spatial_bias, mut spatial, mut merge, mut temporal, mut bias_index) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        let mut fuse = vec![];
        for i in 0..=config.k {
            let (hi, wi) = (h >> i, w >> i);
            spatial_pos.push(p.add(&format!("world.scale{i}.pos"), &[hi * wi, c], Init::Uniform(0.02)));
            let (idx, r) = relative_index(hi, wi, true);
            spatial_bias.push(p.add(&format!("world.scale{i}.rel_bias"), &[heads, r], Init::Zeros));
            bias_index.push(idx);
            spatial.push(TransformerBlock::new(&mut p, &format!("world.scale{i}.mix"), c, heads, config.mlp_ratio));
            if i > 0 {
                merge.push(Linear::new(&mut p, &format!("world.merge{}", i - 1), 4 * c, c, true));
                fuse.push(Conv2d::new(&mut p, &format!("world.fuse{}", i - 1), c, c, 3, 1, 1));
            }
            temporal.push(
                (0..config.layers_per_scale)
                    .map(|l| TransformerBlock::new(&mut p, &format!("world.scale{i}.temporal{l}"), c, heads, config.mlp_ratio))
                    .collect(),
            );
        }
        let temporal_pos = p.add("world.temporal_pos", &[config.max_positions(), c], Init::Uniform(0.02));
        let ego_ctx_ln = LayerNorm::new(&mut p, "world.ego.ctx_ln", c);
        let ego_cross = (0..EGO_LAYERS)
            .map(|l| TransformerBlock::new(&mut p, &format!("world.ego.cross{l}"), c, heads, config.mlp_ratio))
            .collect();
        let ego_temporal = (0..EGO_LAYERS)
            .map(|l| TransformerBlock::new(&mut p, &format!("world.ego.temporal{l}"), c, heads, config.mlp_ratio))
            .collect();
        let final_mix = TransformerBlock::new(&mut p, "world.fuse.mix", c, heads, config.mlp_ratio);
        let (final_index, r) = relative_index(h, w, false);
        let final_bias = p.add("world.fuse.rel_bias", &[heads, r], Init::Zeros);
        let head_ln = LayerNorm::new(&mut p, "world.head.ln", c);
        let head = Linear::new(&mut p, "world.head", c, dims.codes, true);
        let ego_ln = LayerNorm::new(&mut p, "world.ego.decoder_ln", c);
        let ego_head = Mlp::new(&mut p, "world.ego.decoder", c, c, 2);
        Ok(WorldModel {
            config,
            dims,
            params: p,
            ego_embed,
            spatial_pos,
            spatial_bias,
            spatial,
            merge,
            temporal_pos,
            temporal,
            ego_ctx_ln,
            ego_cross,
            ego_temporal,
            fuse,
            final_mix,
            final_bias,
            head_ln,
            head,
            ego_ln,
            ego_head,
            bias_index,
            final_index,
        })
    }

    fn scale_hw(&self, i: usize) -> [usize; 2] {
        [self.dims.token_hw[0] >> i, self.dims.token_hw[1] >> i]
    }

    pub fn base_sites(&self) -> usize {
        self.dims.token_hw[0] * self.dims.token_hw[1]
    }

    /// Ego tokens `[T, C]` from per-frame displacements `[T, 3]`.
    pub fn embed_ego(&self, g: &mut Graph, displacements: &Tensor) -> Result<Var> {
        if displacements.shape().len() != 2 || displacements.shape()[1] != 3 {
            return Err(Error::shape("embed_ego", displacements.shape(), &[0, 3]));
        }
        let x = g.constant(displacements.clone());
        self.ego_embed.forward(g, x)
    }

    /// One spatial-mixing block over each frame of `scene` (`[T, M, C]`),
    /// with the ego token appended as an extra member of every frame.
    fn mix(
        &self,
        g: &mut Graph,
        block: &TransformerBlock,
        table: ParamId,
        index: &[usize],
        scene: Var,
        ego: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let s = g.shape(scene).to_vec();
        let (t, m, c) = (s[0], s[1], s[2]);
        let n = m + ego.is_some() as usize;
        let x = match ego {
            Some(e) => {
                let sm = g.permute(scene, &[1, 0, 2])?;
                let sm = g.reshape(sm, &[m * t, c])?;
                let all = g.concat_rows(&[sm, e])?;
                let all = g.reshape(all, &[n, t, c])?;
                g.permute(all, &[1, 0, 2])?
            }
            None => scene,
        };
        let x = g.reshape(x, &[t * n, c])?;
        let mask = (!self.config.spatial_attn).then(|| diagonal_mask(n));
        let bias = AttnBias {
            mask: mask.as_ref(),
            table: Some((table, index)),
        };
        let y = block.forward(g, x, t, n, bias)?;
        let y = g.reshape(y, &[t, n, c])?;
        if ego.is_none() {
            return Ok((y, None));
        }
        let sm = g.permute(y, &[1, 0, 2])?;
        let sm = g.reshape(sm, &[n * t, c])?;
        let sc = g.slice_rows(sm, 0, m * t)?;
        let e = g.slice_rows(sm, m * t, t)?;
        let sc = g.reshape(sc, &[m, t, c])?;
        let sc = g.permute(sc, &[1, 0, 2])?;
        Ok((sc, Some(e)))
    }

    /// Multi-scale world tokens from base tokens `[T, M₀, C]` and ego tokens `[T, C]`.
    pub fn build_pyramid(&self, g: &mut Graph, tokens: Var, ego: Var) -> Result<Pyramid> {
        let c = self.dims.dim;
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != self.base_sites() || s[2] != c {
            return Err(Error::shape("build_pyramid", &s, &[0, self.base_sites(), c]));
        }
        let t = s[0];
        if g.shape(ego) != [t, c] {
            return Err(Error::shape("build_pyramid", g.shape(ego), &[t, c]));
        }
        let mut scales: Vec<Var> = Vec::with_capacity(self.config.k + 1);
        let mut e = ego;
        for i in 0..=self.config.k {
            let x = if i == 0 {
                tokens
            } else {
                let [h, w] = self.scale_hw(i - 1);
                let im = g.reshape(scales[i - 1], &[t * h, w, c])?;
                let m = g.space_to_depth(im)?;
                let m = g.reshape(m, &[t * (h / 2) * (w / 2), 4 * c])?;
                let m = self.merge[i - 1].forward(g, m)?;
                g.reshape(m, &[t, (h / 2) * (w / 2), c])?
            };
            let pos = g.param(self.spatial_pos[i]);
            let x = g.add_tile(x, pos)?;
            let (sc, e2) = self.mix(g, &self.spatial[i], self.spatial_bias[i], &self.bias_index[i], x, Some(e))?;
            scales.push(sc);
            e = e2.expect("ego row");
        }
        Ok(Pyramid { scales, ego: e })
    }

    fn temporal_mask(&self, t: usize) -> crate::numerics::Tensor {
        if self.config.temporal_attn {
            causal_mask(t)
        } else {
            diagonal_mask(t)
        }
    }

    /// Next-frame predictions for every scale and the ego token; position τ
    /// of the output predicts frame τ+1 and sees only positions ≤ τ.
    pub fn temporal_forecast(&self, g: &mut Graph, pyramid: &Pyramid) -> Result<Pyramid> {
        let c = self.dims.dim;
        let t = g.shape(pyramid.ego)[0];
        if t == 0 || t > self.config.max_positions() {
            return Err(Error::config(format!(
                "window of {t} frames exceeds the {} temporal positions",
                self.config.max_positions()
            )));
        }
        let mask = self.temporal_mask(t);
        let table = g.param(self.temporal_pos);
        let tpos = g.slice_rows(table, 0, t)?;
        let mut out = Vec::with_capacity(pyramid.scales.len());
        for (i, &sc) in pyramid.scales.iter().enumerate() {
            let m = g.shape(sc)[1];
            let x = g.permute(sc, &[1, 0, 2])?;
            let x = g.add_tile(x, tpos)?;
            let mut x = g.reshape(x, &[m * t, c])?;
            for block in &self.temporal[i] {
                let bias = AttnBias {
                    mask: Some(&mask),
                    table: None,
                };
                x = block.forward(g, x, m, t, bias)?;
            }
            let x = g.reshape(x, &[m, t, c])?;
            out.push(g.permute(x, &[1, 0, 2])?);
        }

        // Ego: read every scale of its own frame, then attend over past ego tokens.
        let mut parts = Vec::with_capacity(pyramid.scales.len());
        let mut total = 0;
        for &sc in &pyramid.scales {
            let m = g.shape(sc)[1];
            total += m;
            let sm = g.permute(sc, &[1, 0, 2])?;
            parts.push(g.reshape(sm, &[m * t, c])?);
        }
        let ctx = g.concat_rows(&parts)?;
        let ctx = g.reshape(ctx, &[total, t, c])?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[t * total, c])?;
        let ctx = self.ego_ctx_ln.forward(g, ctx)?;
        let mut e = pyramid.ego;
        for block in &self.ego_cross {
            e = block.forward_cross(g, e, ctx, t, 1, total)?;
        }
        let mut e = g.add(e, tpos)?;
        for block in &self.ego_temporal {
            let bias = AttnBias {
                mask: Some(&mask),
                table: None,
            };
            e = block.forward(g, e, 1, t, bias)?;
        }
        Ok(Pyramid { scales: out, ego: e })
    }

    /// Coarse-to-fine fusion: upsample (nearest ×2, then 3×3 conv per frame),
    /// add to the next finer scale, and finish with one spatial-mixing block.
    /// Returns base tokens `[T·M₀, C]`.
    pub fn unet_fuse(&self, g: &mut Graph, pred: &Pyramid) -> Result<Var> {
        let c = self.dims.dim;
        let k = pred.scales.len() - 1;
        let t = g.shape(pred.scales[0])[0];
        let mut up = pred.scales[k];
        for i in (0..k).rev() {
            let [h, w] = self.scale_hw(i + 1);
            let im = g.reshape(up, &[t * h, w, c])?;
            let u = g.upsample2x(im)?;
            let mut frames = Vec::with_capacity(t);
            for f in 0..t {
                let fr = g.slice_rows(u, 2 * h * f, 2 * h)?;
                frames.push(self.fuse[i].forward(g, fr)?);
            }
            let u = g.concat_rows(&frames)?;
            let u = g.reshape(u, &[t, 4 * h * w, c])?;
            up = g.add(u, pred.scales[i])?;
        }
        let (fused, _) = self.mix(g, &self.final_mix, self.final_bias, &self.final_index, up, None)?;
        g.reshape(fused, &[t * self.base_sites(), c])
    }

    /// Per-site logits over the `N` codes.
    pub fn classify_codes(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let x = self.head_ln.forward(g, fused)?;
        self.head.forward(g, x)
    }

    /// `[T, 2]` displacements from predicted ego tokens `[T, C]`.
    pub fn ego_decode(&self, g: &mut Graph, ego: Var) -> Result<Var> {
        let x = self.ego_ln.forward(g, ego)?;
        self.ego_head.forward(g, x)
    }

    /// Teacher-forced pass over a window: `tokens` `[T, M₀, C]` are codebook
    /// embeddings, `displacements` `[T, 3]` the ego motion into each frame.
    pub fn forward(&self, g: &mut Graph, tokens: &Tensor, displacements: &Tensor) -> Result<WorldOutput> {
        let x = g.constant(tokens.clone());
        let e = self.embed_ego(g, displacements)?;
        if displacements.shape()[0] != tokens.shape().first().copied().unwrap_or(0) {
            return Err(Error::shape("world forward", tokens.shape(), displacements.shape()));
        }
        let pyr = self.build_pyramid(g, x, e)?;
        let pred = self.temporal_forecast(g, &pyr)?;
        let fused = self.unet_fuse(g, &pred)?;
        let logits = self.classify_codes(g, fused)?;
        let ego = self.ego_decode(g, pred.ego)?;
        Ok(WorldOutput { logits, ego })
    }

    /// Inference-only pass returning `(logits, displacements)` tensors.
    pub fn predict(&self, tokens: &Tensor, displacements: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, tokens, displacements)?;
        Ok((g.value(out.logits).clone(), g.value(out.ego).clone()))
    }

    pub fn to_checkpoint(&self, step: u64, dtype: DType) -> Checkpoint {
        let mut config = self.config.to_map();
        config.insert("world.token_grid".into(), format_dims(&self.dims.token_hw));
        config.insert("world.dim".into(), self.dims.dim.to_string());
        config.insert("world.codes".into(), self.dims.codes.to_string());
        Checkpoint {
            module: "world".into(),
            seed: self.config.seed,
            step,
            dtype,
            config,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.module != "world" {
            return Err(Error::Validation(format!("checkpoint holds module {}, not world", ck.module)));
        }
        let get = |k: &str| {
            ck.config
                .get(k)
                .ok_or_else(|| Error::Format(format!("world checkpoint lacks {k}")))
        };
        let token_hw = parse_dims::<2>(get("world.token_grid")?)?;
        let mut dim = 0usize;
        let mut codes = 0usize;
        read_key(&ck.config, "world.dim", &mut dim)?;
        read_key(&ck.config, "world.codes", &mut codes)?;
        let config = WorldConfig::from_map(&ck.config)?;
        let mut model = WorldModel::new(config, WorldDims { token_hw, dim, codes })?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }
}

/// Mean per-site code cross-entropy plus `λ2 ·` mean squared displacement error.
pub fn world_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    ego_pred: Var,
    gt_displacements: &Tensor,
    lambda2: f64,
) -> Result<(Var, WorldLossBreakdown)> {
    if g.shape(logits).len() != 2 || g.shape(logits)[0] != targets.len() {
        return Err(Error::shape("world_loss", g.shape(logits), &[targets.len()]));
    }
    if g.shape(ego_pred) != gt_displacements.shape() || g.shape(ego_pred).len() != 2 {
        return Err(Error::shape("world_loss", g.shape(ego_pred), gt_displacements.shape()));
    }
    let t = gt_displacements.shape()[0].max(1);
    let ce = g.cross_entropy(logits, targets)?;
    let gt = g.constant(gt_displacements.clone());
    let d = g.sub(ego_pred, gt)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    let ego = g.scale(s, lambda2 / t as f64)?;
    let total = g.add(ce, ego)?;
    let parts = WorldLossBreakdown {
        codes: g.value(ce).item(),
        ego: g.value(ego).item(),
        total: g.value(total).item(),
    };
    Ok((total, parts))
}
