//! Stage-1 training: per-frame reconstruction with AdamW and cosine
//! annealing.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Tokenizer, TokenizerConfig};
use crate::error::{Error, Result};
use crate::evalkit::{non_free_classes, IouAccumulator};
use crate::numerics::params::named_rng;
use crate::numerics::{adamw_step_store, clip_grad_norm, cosine_anneal_lr, AdamWConfig, Graph, OptimState, Tensor};
use crate::occgrid::OccGrid;

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerEval {
    pub step: usize,
    pub epoch: f64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Held-out reconstruction scores (fractions).
    pub miou: f64,
    pub iou: f64,
    /// Distinct codes used on the held-out frames.
    pub codes_used: usize,
}

impl TokenizerEval {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={:.3} step={} loss={:.6} miou={:.4} iou={:.4} codes_used={}",
            self.epoch, self.step, self.loss, self.miou, self.iou, self.codes_used
        )
    }
}

pub struct TrainedTokenizer {
    pub tokenizer: Tokenizer,
    pub history: Vec<TokenizerEval>,
    pub steps: usize,
}

fn check_frames(frames: &[OccGrid], cfg: &TokenizerConfig) -> Result<()> {
    for (i, g) in frames.iter().enumerate() {
        if g.dims() != cfg.grid || g.num_classes() as usize != cfg.num_classes {
            return Err(Error::Validation(format!(
                "frame {i}: dims {:?}/{} classes do not match tokenizer {:?}/{}",
                g.dims(),
                g.num_classes(),
                cfg.grid,
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Held-out reconstruction scores over `frames`.
pub fn evaluate_reconstruction(tok: &Tokenizer, frames: &[OccGrid]) -> Result<(f64, f64, usize)> {
    let mut acc = IouAccumulator::new(tok.config.num_classes as u8);
    let mut used = vec![false; tok.config.codebook_size];
    for g in frames {
        let t = tok.tokenize(g)?;
        for &i in &t.indices {
            used[i] = true;
        }
        let rec = tok.decode_indices(&t.indices, t.hw)?;
        acc.add(&rec, g)?;
    }
    let miou = acc.miou(&non_free_classes(tok.config.num_classes as u8)).miou;
    Ok((miou, acc.iou(), used.iter().filter(|&&u| u).count()))
}

/// k-means++ seeding of the codebook from encoder latents of training frames.
fn init_codebook_from_data(tok: &mut Tokenizer, frames: &[OccGrid]) -> Result<()> {
    let cfg = &tok.config;
    let (n, c) = (cfg.codebook_size, cfg.latent_channels);
    let mut rng = named_rng(cfg.seed, "tokenizer.codebook_init");
    let sites = cfg.token_hw()[0] * cfg.token_hw()[1];
    let want_frames = (4 * n).div_ceil(sites).clamp(1, frames.len());
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut rng);
    let mut pts: Vec<f64> = Vec::new();
    for &i in order.iter().take(want_frames) {
        pts.extend_from_slice(tok.latent(&frames[i])?.data());
    }
    let m = pts.len() / c;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut chosen = Vec::with_capacity(n * c);
    let first = rng.random_range(0..m);
    chosen.extend_from_slice(&pts[first * c..(first + 1) * c]);
    let mut d2: Vec<f64> = (0..m).map(|i| dist(&pts[i * c..(i + 1) * c], &chosen[..c])).collect();
    for _ in 1..n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        let p = pts[pick * c..(pick + 1) * c].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(&pts[i * c..(i + 1) * c], &p));
        }
        chosen.extend_from_slice(&p);
    }
    let id = tok.codebook_id();
    *tok.params.get_mut(id) = Tensor::new(&[n, c], chosen)?;
    Ok(())
}

/// Replaces every code with no recorded use by an encoder latent drawn from
/// random training frames; returns how many codes were re-seeded.
fn restart_dead_codes(
    tok: &mut Tokenizer,
    usage: &[u64],
    frames: &[OccGrid],
    opt: &mut OptimState,
    rng: &mut impl Rng,
) -> Result<usize> {
    let dead: Vec<usize> = (0..usage.len()).filter(|&i| usage[i] == 0).collect();
    if dead.is_empty() {
        return Ok(0);
    }
    let c = tok.config.latent_channels;
    let mut pool: Vec<f64> = Vec::new();
    let sites = tok.config.token_hw()[0] * tok.config.token_hw()[1];
    for _ in 0..dead.len().div_ceil(sites).clamp(1, 4) {
        pool.extend_from_slice(tok.latent(&frames[rng.random_range(0..frames.len())])?.data());
    }
    let rows = pool.len() / c;
    let id = tok.codebook_id();
    for &code in &dead {
        let r = rng.random_range(0..rows);
        tok.params.get_mut(id).data_mut()[code * c..(code + 1) * c].copy_from_slice(&pool[r * c..(r + 1) * c]);
        opt.reset_moments(id.index(), code * c..(code + 1) * c);
    }
    Ok(dead.len())
}

/// Trains a tokenizer on `train`; `on_eval` receives every metrics record.
pub fn train_tokenizer(
    train: &[OccGrid],
    heldout: &[OccGrid],
    config: &TokenizerConfig,
    on_eval: &mut dyn FnMut(&TokenizerEval),
) -> Result<TrainedTokenizer> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    check_frames(train, config)?;
    check_frames(heldout, config)?;
    let mut tok = Tokenizer::new(config.clone())?;
    if config.codebook_init == "data" {
        init_codebook_from_data(&mut tok, train)?;
    }
    let eval_set: Vec<OccGrid> = if heldout.is_empty() {
        Vec::new()
    } else {
        let n = config.eval_frames.min(heldout.len()).max(1);
        (0..n).map(|i| heldout[i * heldout.len() / n].clone()).collect()
    };

    let mut opt = OptimState::for_store(
        &tok.params,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = named_rng(config.seed, "tokenizer.order");
    let mut restart_rng = named_rng(config.seed, "tokenizer.restart");
    let mut usage = vec![0u64; config.codebook_size];
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut seen = 0usize;

    for step in 0..config.steps {
        let lr = cosine_anneal_lr(step as u64, config.steps as u64, config.lr, config.lr_min);
        let mut acc: Vec<Tensor> = tok.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let frame = &train[order[cursor]];
            cursor += 1;
            seen += 1;
            let mut g = Graph::with_params(&tok.params);
            let (loss, parts, tokens) = tok.forward_loss(&mut g, frame)?;
            for &i in &tokens.indices {
                usage[i] += 1;
            }
            if !parts.total.is_finite() {
                return Err(Error::Divergence(format!("tokenizer loss {} at step {step}", parts.total)));
            }
            batch_loss += parts.total;
            let grads = g.backward(loss)?;
            for (id, gt) in g.param_grads(&grads) {
                acc[id.index()].add_assign(&gt);
            }
        }
        let inv = 1.0 / config.batch as f64;
        let mut grads: Vec<_> = tok
            .params
            .ids()
            .zip(acc)
            .map(|(id, mut t)| {
                t.scale_assign(inv);
                (id, t)
            })
            .collect();
        if config.clip > 0.0 {
            clip_grad_norm(&mut grads, config.clip);
        }
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence(format!("non-finite tokenizer gradient at step {step}")));
        }
        adamw_step_store(&mut tok.params, &grads, &mut opt, lr)?;
        if config.restart_every > 0 && (step + 1) % config.restart_every == 0 && step + 1 < config.steps {
            restart_dead_codes(&mut tok, &usage, train, &mut opt, &mut restart_rng)?;
            usage.fill(0);
        }
        loss_sum += batch_loss * inv;
        loss_count += 1;

        let last = step + 1 == config.steps;
        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0) || last {
            let (miou, iou, codes_used) = if eval_set.is_empty() {
                (f64::NAN, f64::NAN, 0)
            } else {
                evaluate_reconstruction(&tok, &eval_set)?
            };
            let rec = TokenizerEval {
                step: step + 1,
                epoch: seen as f64 / train.len() as f64,
                loss: loss_sum / loss_count.max(1) as f64,
                miou,
                iou,
                codes_used,
            };
            on_eval(&rec);
            history.push(rec);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainedTokenizer {
        tokenizer: tok,
        history,
        steps: config.steps,
    })
}
