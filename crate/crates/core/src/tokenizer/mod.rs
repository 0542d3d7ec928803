//! Occupancy scene tokenizer: class-embedding BEV flattening, a strided
//! convolutional encoder, nearest-code quantization and a transposed
//! convolutional decoder producing per-voxel class logits.

mod lovasz;
mod quantize;
mod train;

pub use lovasz::{lovasz_softmax, lovasz_softmax_with_grad, LovaszOutput};
pub use quantize::{nearest_code, quantize, TokenMap};
pub use train::{evaluate_reconstruction, train_tokenizer, TokenizerEval, TrainedTokenizer};

use crate::config::{format_dims, parse_dims, read_key, ConfigMap};
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv2d, ConvTranspose2d, LayerNorm, Linear};
use crate::numerics::{Checkpoint, DType, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::occgrid::OccGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    /// Grid extents `[H, W, D]` and class count the tokenizer is built for.
    pub grid: [usize; 3],
    pub num_classes: usize,
    /// Spatial downsample factor (2, 4 or 8).
    pub d: usize,
    /// Latent / code channels.
    pub latent_channels: usize,
    pub codebook_size: usize,
    /// Per-class embedding width.
    pub class_dim: usize,
    /// Channel width of the convolutional stages.
    pub hidden: usize,
    pub lambda1: f64,
    pub beta: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub eval_every: usize,
    pub eval_frames: usize,
    /// `data`: codes start as encoder outputs of training frames;
    /// `uniform`: uniform(±1/N).
    pub codebook_init: String,
    /// Every this many steps, codes no frame selected since the previous
    /// check are re-seeded from current encoder outputs; 0 disables.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            grid: [64, 64, 8],
            num_classes: 6,
            d: 4,
            latent_channels: 128,
            codebook_size: 512,
            class_dim: 8,
            hidden: 64,
            lambda1: 1.0,
            beta: 0.25,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            steps: 1000,
            batch: 4,
            clip: 0.0,
            eval_every: 200,
            eval_frames: 64,
            codebook_init: "data".into(),
            restart_every: 50,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub const KEYS: &'static [&'static str] = &[
        "tokenizer.grid",
        "tokenizer.classes",
        "tokenizer.d",
        "tokenizer.C",
        "tokenizer.N",
        "tokenizer.Cprime",
        "tokenizer.hidden",
        "tokenizer.lambda1",
        "tokenizer.beta",
        "tokenizer.lr",
        "tokenizer.lr_min",
        "tokenizer.weight_decay",
        "tokenizer.steps",
        "tokenizer.batch",
        "tokenizer.clip",
        "tokenizer.eval_every",
        "tokenizer.eval_frames",
        "tokenizer.codebook_init",
        "tokenizer.restart_every",
        "tokenizer.seed",
    ];

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut c = TokenizerConfig::default();
        c.apply(map)?;
        Ok(c)
    }

    /// Overrides fields with the `tokenizer.*` keys present in `map`.
    pub fn apply(&mut self, map: &ConfigMap) -> Result<()> {
        if let Some(g) = map.get("tokenizer.grid") {
            self.grid = parse_dims::<3>(g)?;
        }
        read_key(map, "tokenizer.classes", &mut self.num_classes)?;
        read_key(map, "tokenizer.d", &mut self.d)?;
        read_key(map, "tokenizer.C", &mut self.latent_channels)?;
        read_key(map, "tokenizer.N", &mut self.codebook_size)?;
        read_key(map, "tokenizer.Cprime", &mut self.class_dim)?;
        read_key(map, "tokenizer.hidden", &mut self.hidden)?;
        read_key(map, "tokenizer.lambda1", &mut self.lambda1)?;
        read_key(map, "tokenizer.beta", &mut self.beta)?;
        read_key(map, "tokenizer.lr", &mut self.lr)?;
        read_key(map, "tokenizer.lr_min", &mut self.lr_min)?;
        read_key(map, "tokenizer.weight_decay", &mut self.weight_decay)?;
        read_key(map, "tokenizer.steps", &mut self.steps)?;
        read_key(map, "tokenizer.batch", &mut self.batch)?;
        read_key(map, "tokenizer.clip", &mut self.clip)?;
        read_key(map, "tokenizer.eval_every", &mut self.eval_every)?;
        read_key(map, "tokenizer.eval_frames", &mut self.eval_frames)?;
        read_key(map, "tokenizer.codebook_init", &mut self.codebook_init)?;
        read_key(map, "tokenizer.restart_every", &mut self.restart_every)?;
        read_key(map, "tokenizer.seed", &mut self.seed)?;
        self.validate()
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("tokenizer.grid", format_dims(&self.grid));
        put("tokenizer.classes", self.num_classes.to_string());
        put("tokenizer.d", self.d.to_string());
        put("tokenizer.C", self.latent_channels.to_string());
        put("tokenizer.N", self.codebook_size.to_string());
        put("tokenizer.Cprime", self.class_dim.to_string());
        put("tokenizer.hidden", self.hidden.to_string());
        put("tokenizer.lambda1", self.lambda1.to_string());
        put("tokenizer.beta", self.beta.to_string());
        put("tokenizer.lr", self.lr.to_string());
        put("tokenizer.lr_min", self.lr_min.to_string());
        put("tokenizer.weight_decay", self.weight_decay.to_string());
        put("tokenizer.steps", self.steps.to_string());
        put("tokenizer.batch", self.batch.to_string());
        put("tokenizer.clip", self.clip.to_string());
        put("tokenizer.eval_every", self.eval_every.to_string());
        put("tokenizer.eval_frames", self.eval_frames.to_string());
        put("tokenizer.codebook_init", self.codebook_init.clone());
        put("tokenizer.restart_every", self.restart_every.to_string());
        put("tokenizer.seed", self.seed.to_string());
        m
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.d, 2 | 4 | 8) {
            return Err(Error::config(format!("tokenizer.d must be 2, 4 or 8, got {}", self.d)));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("tokenizer.N must be >= 2"));
        }
        if self.latent_channels == 0 || self.class_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::config("tokenizer widths and class count must be >= 1"));
        }
        if !self.grid[0].is_multiple_of(self.d) || !self.grid[1].is_multiple_of(self.d) {
            return Err(Error::config(format!(
                "grid {:?} not divisible by downsample factor {}",
                self.grid, self.d
            )));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::config("tokenizer.lr must be > 0 and tokenizer.batch >= 1"));
        }
        if !matches!(self.codebook_init.as_str(), "data" | "uniform") {
            return Err(Error::config(format!(
                "tokenizer.codebook_init must be data or uniform, got {}",
                self.codebook_init
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.d.trailing_zeros() as usize
    }

    pub fn token_hw(&self) -> [usize; 2] {
        [self.grid[0] / self.d, self.grid[1] / self.d]
    }
}

/// Component values of the stage-1 objective; `lovasz` and `commitment`
/// already include their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub soft: f64,
    pub lovasz: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Output of the quantization step inside a graph.
pub struct Quantized {
    pub tokens: TokenMap,
    /// Codebook rows gathered on the graph (gradient reaches the codebook).
    pub codes: Var,
    /// Straight-through output fed to the decoder.
    pub st: Var,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
    class_embed: ParamId,
    enc: Vec<(Conv2d, LayerNorm)>,
    enc_proj: Linear,
    codebook: ParamId,
    dec: Vec<(ConvTranspose2d, LayerNorm)>,
    head: Linear,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(config.seed);
        let k = config.num_classes;
        let depth = config.grid[2];
        let class_embed = p.add("tokenizer.class_embed", &[k, config.class_dim], Init::Uniform(1.0));
        let mut enc = Vec::new();
        let mut cin = depth * config.class_dim;
        for s in 0..config.stages() {
            let conv = Conv2d::new(&mut p, &format!("tokenizer.encoder.conv{s}"), cin, config.hidden, 3, 2, 1);
            let ln = LayerNorm::new(&mut p, &format!("tokenizer.encoder.ln{s}"), config.hidden);
            enc.push((conv, ln));
            cin = config.hidden;
        }
        let enc_proj = Linear::new(&mut p, "tokenizer.encoder.proj", config.hidden, config.latent_channels, true);
        let n = config.codebook_size;
        let codebook = p.add("tokenizer.codebook", &[n, config.latent_channels], Init::Uniform(1.0 / n as f64));
        let mut dec = Vec::new();
        let mut cin = config.latent_channels;
        for s in 0..config.stages() {
            let conv = ConvTranspose2d::new(&mut p, &format!("tokenizer.decoder.deconv{s}"), cin, config.hidden, 4, 2, 1);
            let ln = LayerNorm::new(&mut p, &format!("tokenizer.decoder.ln{s}"), config.hidden);
            dec.push((conv, ln));
            cin = config.hidden;
        }
        let head = Linear::new(&mut p, "tokenizer.decoder.head", config.hidden, depth * k, true);
        Ok(Tokenizer {
            config,
            params: p,
            class_embed,
            enc,
            enc_proj,
            codebook,
            dec,
            head,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn class_table(&self) -> &Tensor {
        self.params.get(self.class_embed)
    }

    fn check_grid(&self, grid: &OccGrid) -> Result<()> {
        let [h, w, d] = grid.dims();
        if grid.num_classes() as usize != self.config.num_classes || d != self.config.grid[2] {
            return Err(Error::shape(
                "embed_bev",
                &[h, w, d, grid.num_classes() as usize],
                &[self.config.grid[0], self.config.grid[1], self.config.grid[2], self.config.num_classes],
            ));
        }
        Ok(())
    }

    /// `[H, W, D·C′]` feature: channel block `d` holds the embedding of voxel
    /// `(h, w, d)`.
    pub fn embed_bev(&self, g: &mut Graph, grid: &OccGrid) -> Result<Var> {
        self.check_grid(grid)?;
        let [h, w, d] = grid.dims();
        let idx: Vec<usize> = grid.labels().iter().map(|&l| l as usize).collect();
        let table = g.param(self.class_embed);
        let rows = g.gather_rows(table, &idx)?;
        g.reshape(rows, &[h, w, d * self.config.class_dim])
    }

    /// `[H, W, D·C′]` → `[H/d, W/d, C]`.
    pub fn encode(&self, g: &mut Graph, bev: Var) -> Result<Var> {
        let s = g.shape(bev).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(self.config.d) || !s[1].is_multiple_of(self.config.d) {
            return Err(Error::shape("encode", &s, &[self.config.d, self.config.d]));
        }
        let mut x = bev;
        for (conv, ln) in &self.enc {
            x = conv.forward(g, x)?;
            x = ln.forward(g, x)?;
            x = g.gelu(x)?;
        }
        let (h, w) = (s[0] / self.config.d, s[1] / self.config.d);
        let flat = g.reshape(x, &[h * w, self.config.hidden])?;
        let z = self.enc_proj.forward(g, flat)?;
        g.reshape(z, &[h, w, self.config.latent_channels])
    }

    pub fn quantize_graph(&self, g: &mut Graph, latent: Var) -> Result<Quantized> {
        let tokens = quantize(g.value(latent), self.codebook())?;
        let book = g.param(self.codebook);
        let rows = g.gather_rows(book, &tokens.indices)?;
        let codes = g.reshape(rows, g.shape(latent).to_vec().as_slice())?;
        let st = g.straight_through(latent, tokens.embeddings.clone())?;
        Ok(Quantized { tokens, codes, st })
    }

    /// `[h, w, C]` code embeddings → `[H·W·D, num_classes]` logits.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.config.latent_channels {
            return Err(Error::shape("decode", &s, &[self.config.latent_channels]));
        }
        let mut x = z;
        for (conv, ln) in &self.dec {
            x = conv.forward(g, x)?;
            x = ln.forward(g, x)?;
            x = g.gelu(x)?;
        }
        let (h, w) = (s[0] * self.config.d, s[1] * self.config.d);
        let flat = g.reshape(x, &[h * w, self.config.hidden])?;
        let logits = self.head.forward(g, flat)?;
        g.reshape(logits, &[h * w * self.config.grid[2], self.config.num_classes])
    }

    /// Full reconstruction objective for one frame.
    pub fn forward_loss(&self, g: &mut Graph, grid: &OccGrid) -> Result<(Var, LossBreakdown, TokenMap)> {
        let bev = self.embed_bev(g, grid)?;
        let latent = self.encode(g, bev)?;
        let q = self.quantize_graph(g, latent)?;
        let logits = self.decode(g, q.st)?;
        let (loss, parts) = tokenizer_loss(g, logits, grid, latent, q.codes, self.config.lambda1, self.config.beta)?;
        Ok((loss, parts, q.tokens))
    }

    /// Encoder latent map of a grid (no gradients).
    pub fn latent(&self, grid: &OccGrid) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let bev = self.embed_bev(&mut g, grid)?;
        let z = self.encode(&mut g, bev)?;
        Ok(g.value(z).clone())
    }

    pub fn tokenize(&self, grid: &OccGrid) -> Result<TokenMap> {
        quantize(&self.latent(grid)?, self.codebook())
    }

    /// Decoder logits `[H·W·D, K]` for a map of code indices.
    pub fn decode_logits(&self, indices: &[usize], hw: [usize; 2]) -> Result<Tensor> {
        if indices.len() != hw[0] * hw[1] {
            return Err(Error::shape("decode", &[indices.len()], &hw));
        }
        let mut g = Graph::inference(&self.params);
        let book = g.param(self.codebook);
        let rows = g.gather_rows(book, indices)?;
        let z = g.reshape(rows, &[hw[0], hw[1], self.config.latent_channels])?;
        let logits = self.decode(&mut g, z)?;
        Ok(g.value(logits).clone())
    }

    /// Per-voxel argmax of the decoded logits.
    pub fn decode_indices(&self, indices: &[usize], hw: [usize; 2]) -> Result<OccGrid> {
        let logits = self.decode_logits(indices, hw)?;
        let k = self.config.num_classes;
        let labels = logits
            .data()
            .chunks_exact(k)
            .map(|row| argmax(row) as u8)
            .collect();
        let dims = [hw[0] * self.config.d, hw[1] * self.config.d, self.config.grid[2]];
        OccGrid::new(dims, k as u8, labels)
    }

    pub fn reconstruct(&self, grid: &OccGrid) -> Result<OccGrid> {
        let t = self.tokenize(grid)?;
        self.decode_indices(&t.indices, t.hw)
    }

    pub fn to_checkpoint(&self, step: u64, dtype: DType) -> Checkpoint {
        Checkpoint {
            module: "tokenizer".into(),
            seed: self.config.seed,
            step,
            dtype,
            config: self.config.to_map(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.module != "tokenizer" {
            return Err(Error::Validation(format!("checkpoint holds module {}, not tokenizer", ck.module)));
        }
        let config = TokenizerConfig::from_map(&ck.config)?;
        let mut tok = Tokenizer::new(config)?;
        tok.params.load_from(&ck.params)?;
        Ok(tok)
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `L_soft + λ1·L_lovasz + ‖sg(z) − e‖² + β‖z − sg(e)‖²`, squared norms
/// summed over channels and averaged over latent sites.
pub fn tokenizer_loss(
    g: &mut Graph,
    logits: Var,
    target: &OccGrid,
    latent: Var,
    codes: Var,
    lambda1: f64,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let k = g.shape(logits)[1];
    let targets: Vec<usize> = target.labels().iter().map(|&l| l as usize).collect();
    let soft = g.cross_entropy(logits, &targets)?;

    let probs = g.softmax(logits)?;
    let lov = lovasz_softmax_with_grad(g.value(probs).data(), k, target.labels())?;
    let grad = Tensor::new(g.shape(probs), lov.grad)?;
    let lv = g.scalar_loss(probs, lov.loss, grad)?;
    let lv = g.scale(lv, lambda1)?;

    if g.shape(latent) != g.shape(codes) {
        return Err(Error::shape("tokenizer_loss", g.shape(latent), g.shape(codes)));
    }
    let sites = (g.value(latent).numel() / g.shape(latent).last().copied().unwrap_or(1)).max(1) as f64;
    let zd = g.detach(latent);
    let d1 = g.sub(zd, codes)?;
    let s1 = g.mul(d1, d1)?;
    let s1 = g.sum(s1)?;
    let cb = g.scale(s1, 1.0 / sites)?;
    let ed = g.detach(codes);
    let d2 = g.sub(latent, ed)?;
    let s2 = g.mul(d2, d2)?;
    let s2 = g.sum(s2)?;
    let cm = g.scale(s2, beta / sites)?;

    let t = g.add(soft, lv)?;
    let t = g.add(t, cb)?;
    let total = g.add(t, cm)?;
    let parts = LossBreakdown {
        soft: g.value(soft).item(),
        lovasz: g.value(lv).item(),
        codebook: g.value(cb).item(),
        commitment: g.value(cm).item(),
        total: g.value(total).item(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests;
