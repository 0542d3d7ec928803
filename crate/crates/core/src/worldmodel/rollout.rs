//! Autoregressive forecasting with a sliding context window.

use rand::Rng;

use super::train::embed_indices;
use super::{ego_displacements, Decoding, Trajectory, WorldModel};
use crate::error::{Error, Result};
use crate::numerics::params::named_rng;
use crate::numerics::Tensor;
use crate::occgrid::{EgoPose, OccGrid, OccSequence};
use crate::tokenizer::{argmax, Tokenizer};

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub grids: Vec<OccGrid>,
    pub tokens: Vec<Vec<usize>>,
    pub trajectory: Trajectory,
}

fn sample(row: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let mut r = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, &x) in w.iter().enumerate() {
        if r < x {
            return i;
        }
        r -= x;
    }
    row.len() - 1
}

/// Forecasts `steps` frames of code indices and displacements from the
/// last `t + 1` history frames. Each step predicts from the window, then
/// slides it: the oldest frame drops out and the prediction (its codebook
/// embeddings and displacement) is appended.
pub fn rollout_tokens(
    model: &WorldModel,
    codebook: &Tensor,
    history: &[Vec<usize>],
    poses: &[EgoPose],
    steps: usize,
) -> Result<(Vec<Vec<usize>>, Vec<[f64; 2]>)> {
    let t = model.config.window();
    if history.len() < t || poses.len() != history.len() {
        return Err(Error::Length(format!(
            "rollout needs {t} history frames with poses, got {} frames and {} poses",
            history.len(),
            poses.len()
        )));
    }
    if steps == 0 || t + steps > model.config.max_positions() {
        return Err(Error::config(format!(
            "rollout steps must be in 1..={} (temporal position capacity {})",
            model.config.max_positions() - t,
            model.config.max_positions()
        )));
    }
    let m = model.base_sites();
    let mut window: Vec<Vec<usize>> = history[history.len() - t..].to_vec();
    let mut disp: Vec<[f64; 3]> = ego_displacements(&poses[poses.len() - t..])
        .data()
        .chunks(3)
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    let mut rng = named_rng(model.config.seed, "world.rollout");
    let (mut out_tokens, mut out_disp) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for _ in 0..steps {
        let tokens = embed_indices(codebook, &window)?;
        let d = Tensor::new(&[t, 3], disp.iter().flatten().copied().collect())?;
        let (logits, ego) = model.predict(&tokens, &d)?;
        let n = logits.shape()[1];
        let last = &logits.data()[(t - 1) * m * n..];
        let next: Vec<usize> = match model.config.decoding {
            Decoding::Argmax => last.chunks(n).map(argmax).collect(),
            Decoding::Sample(temp) => last.chunks(n).map(|r| sample(r, temp, &mut rng)).collect(),
        };
        let e = ego.row(t - 1);
        let step = [e[0], e[1]];
        window.remove(0);
        window.push(next.clone());
        disp.remove(0);
        disp.push([step[0], step[1], 0.0]);
        // Windows never see motion into their first frame.
        disp[0] = [0.0; 3];
        out_tokens.push(next);
        out_disp.push(step);
    }
    Ok((out_tokens, out_disp))
}

/// Forecasts `steps` occupancy frames and the ego trajectory from a history window.
pub fn rollout(model: &WorldModel, tok: &Tokenizer, history: &OccSequence, steps: usize) -> Result<Rollout> {
    let t = model.config.window();
    if history.len() < t {
        return Err(Error::Length(format!(
            "history has {} frames, the model needs {t}",
            history.len()
        )));
    }
    let start = history.len() - t;
    let frames = history
        .grids()
        .skip(start)
        .map(|g| tok.tokenize(g).map(|m| m.indices))
        .collect::<Result<Vec<_>>>()?;
    let poses: Vec<EgoPose> = history.poses()[start..].to_vec();
    let (tokens, disp) = rollout_tokens(model, tok.codebook(), &frames, &poses, steps)?;
    let grids = tokens
        .iter()
        .map(|idx| tok.decode_indices(idx, model.dims.token_hw))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout {
        grids,
        tokens,
        trajectory: Trajectory::from_displacements(&disp)?,
    })
}
