//! Stage-2 training: teacher-forced windows of frozen-tokenizer tokens.

use rand::seq::SliceRandom;

use super::{ego_displacements, world_loss, WorldConfig, WorldDims, WorldModel};
use crate::error::{Error, Result};
use crate::evalkit::{non_free_classes, IouAccumulator};
use crate::numerics::params::named_rng;
use crate::numerics::{adamw_step_store, clip_grad_norm, cosine_anneal_lr, AdamWConfig, Graph, OptimState, Tensor};
use crate::occgrid::{EgoPose, OccGrid, OccSequence};
use crate::tokenizer::{argmax, Tokenizer};

/// A sequence with its frozen-tokenizer code indices.
#[derive(Clone, Debug)]
pub struct TokenizedSequence {
    pub indices: Vec<Vec<usize>>,
    pub poses: Vec<EgoPose>,
    pub grids: Vec<OccGrid>,
}

impl TokenizedSequence {
    pub fn new(tok: &Tokenizer, seq: &OccSequence) -> Result<Self> {
        let indices = seq
            .grids()
            .map(|g| tok.tokenize(g).map(|t| t.indices))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenizedSequence {
            indices,
            poses: seq.poses(),
            grids: seq.grids().cloned().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Codebook rows for each frame's indices, `[T, M₀, C]`.
pub(crate) fn embed_indices(codebook: &Tensor, frames: &[Vec<usize>]) -> Result<Tensor> {
    let c = codebook.shape()[1];
    let m = frames.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(frames.len() * m * c);
    for f in frames {
        if f.len() != m {
            return Err(Error::shape("embed_indices", &[f.len()], &[m]));
        }
        for &i in f {
            if i >= codebook.shape()[0] {
                return Err(Error::Validation(format!("code index {i} >= {}", codebook.shape()[0])));
            }
            data.extend_from_slice(codebook.row(i));
        }
    }
    Tensor::new(&[frames.len(), m, c], data)
}

/// One teacher-forced training window.
pub(crate) struct Window {
    pub tokens: Tensor,
    pub displacements: Tensor,
    pub targets: Vec<usize>,
    pub gt: Tensor,
}

pub(crate) fn make_window(codebook: &Tensor, seq: &TokenizedSequence, start: usize, t: usize) -> Result<Window> {
    if start + t >= seq.len() {
        return Err(Error::Length(format!(
            "window at {start} needs {} frames, sequence has {}",
            start + t + 1,
            seq.len()
        )));
    }
    let tokens = embed_indices(codebook, &seq.indices[start..start + t])?;
    let displacements = ego_displacements(&seq.poses[start..start + t]);
    let targets = seq.indices[start + 1..start + t + 1].concat();
    let mut gt = Vec::with_capacity(2 * t);
    for k in start..start + t {
        let (dx, dy, _) = seq.poses[k].relative(&seq.poses[k + 1]);
        gt.extend_from_slice(&[dx, dy]);
    }
    Ok(Window {
        tokens,
        displacements,
        targets,
        gt: Tensor::new(&[t, 2], gt)?,
    })
}

fn windows_of(seqs: &[TokenizedSequence], t: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        for start in 0..seq.len().saturating_sub(t) {
            out.push((s, start));
        }
    }
    out
}

/// One line of the stage-2 metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldEval {
    pub step: usize,
    pub epoch: f64,
    pub loss: f64,
    /// Held-out next-frame code accuracy over all window positions.
    pub token_acc: f64,
    /// Mean held-out displacement error, meters.
    pub ego_l2: f64,
    /// Held-out mIoU of the decoded prediction for the frame after each window.
    pub miou: f64,
}

impl WorldEval {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={:.3} step={} loss={:.6} miou={:.4} token_acc={:.4} ego_l2={:.4}",
            self.epoch, self.step, self.loss, self.miou, self.token_acc, self.ego_l2
        )
    }
}

pub struct TrainedWorld {
    pub model: WorldModel,
    pub history: Vec<WorldEval>,
    pub steps: usize,
}

/// Teacher-forced held-out scores over up to `max_windows` evenly spaced windows.
pub fn evaluate_world(
    model: &WorldModel,
    tok: &Tokenizer,
    seqs: &[TokenizedSequence],
    max_windows: usize,
) -> Result<(f64, f64, f64)> {
    let t = model.config.window();
    let all = windows_of(seqs, t);
    if all.is_empty() || max_windows == 0 {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let n = max_windows.min(all.len());
    let m = model.base_sites();
    let (mut correct, mut total, mut l2, mut l2n) = (0usize, 0usize, 0.0, 0usize);
    let mut acc = IouAccumulator::new(tok.config.num_classes as u8);
    for i in 0..n {
        let (s, start) = all[i * all.len() / n];
        let w = make_window(tok.codebook(), &seqs[s], start, t)?;
        let (logits, ego) = model.predict(&w.tokens, &w.displacements)?;
        let k = logits.shape()[1];
        let pred: Vec<usize> = logits.data().chunks(k).map(argmax).collect();
        correct += pred.iter().zip(&w.targets).filter(|(a, b)| a == b).count();
        total += pred.len();
        for (p, q) in ego.data().chunks(2).zip(w.gt.data().chunks(2)) {
            l2 += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            l2n += 1;
        }
        let last = &pred[(t - 1) * m..];
        let grid = tok.decode_indices(last, model.dims.token_hw)?;
        acc.add(&grid, &seqs[s].grids[start + t])?;
    }
    let miou = acc.miou(&non_free_classes(tok.config.num_classes as u8)).miou;
    Ok((correct as f64 / total as f64, l2 / l2n as f64, miou))
}

/// Trains a world model on tokenized sequences from a frozen tokenizer.
pub fn train_world(
    train: &[TokenizedSequence],
    heldout: &[TokenizedSequence],
    tok: &Tokenizer,
    config: &WorldConfig,
    on_eval: &mut dyn FnMut(&WorldEval),
) -> Result<TrainedWorld> {
    config.validate()?;
    let t = config.window();
    let windows = windows_of(train, t);
    if windows.is_empty() {
        return Err(Error::Validation(format!(
            "no training window: sequences need at least {} frames",
            t + 1
        )));
    }
    let mut model = WorldModel::new(config.clone(), WorldDims::from_tokenizer(tok))?;
    let mut opt = OptimState::for_store(
        &model.params,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = named_rng(config.seed, "world.order");
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_count, mut seen) = (0.0, 0usize, 0usize);

    for step in 0..config.steps {
        let lr = cosine_anneal_lr(step as u64, config.steps as u64, config.lr, config.lr_min);
        let mut acc: Vec<Tensor> = model.params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch {
            if cursor == order.len() {
                order = windows.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (s, start) = order[cursor];
            cursor += 1;
            seen += 1;
            let w = make_window(tok.codebook(), &train[s], start, t)?;
            let mut g = Graph::with_params(&model.params);
            let out = model.forward(&mut g, &w.tokens, &w.displacements)?;
            let (loss, parts) = world_loss(&mut g, out.logits, &w.targets, out.ego, &w.gt, config.lambda2)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence(format!("world loss {} at step {step}", parts.total)));
            }
            batch_loss += parts.total;
            let grads = g.backward(loss)?;
            for (id, gt) in g.param_grads(&grads) {
                acc[id.index()].add_assign(&gt);
            }
        }
        let inv = 1.0 / config.batch as f64;
        let mut grads: Vec<_> = model
            .params
            .ids()
            .zip(acc)
            .map(|(id, mut g)| {
                g.scale_assign(inv);
                (id, g)
            })
            .collect();
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite world gradient at step {step}")));
        }
        if config.clip > 0.0 {
            clip_grad_norm(&mut grads, config.clip);
        }
        adamw_step_store(&mut model.params, &grads, &mut opt, lr)?;
        loss_sum += batch_loss * inv;
        loss_count += 1;

        let last = step + 1 == config.steps;
        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0) || last {
            let (token_acc, ego_l2, miou) = evaluate_world(&model, tok, heldout, config.eval_windows)?;
            let rec = WorldEval {
                step: step + 1,
                epoch: seen as f64 / windows.len() as f64,
                loss: loss_sum / loss_count.max(1) as f64,
                token_acc,
                ego_l2,
                miou,
            };
            on_eval(&rec);
            history.push(rec);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainedWorld {
        model,
        history,
        steps: config.steps,
    })
}
