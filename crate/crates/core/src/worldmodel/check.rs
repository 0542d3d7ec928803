use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{world_loss, WorldConfig, WorldDims, WorldModel};
use crate::error::Result;
use crate::numerics::{grad_check_store, GradCheckReport, Tensor};

/// The smallest complete model: a 4×4 base grid, one merge, one layer per
/// scale, one head, `t = 2` and 4-channel tokens over 5 codes.
pub fn tiny_world_model(seed: u64) -> Result<WorldModel> {
    let config = WorldConfig {
        k: 1,
        layers_per_scale: 1,
        heads: 1,
        mlp_ratio: 1,
        history_frames: 2,
        future_frames: 3,
        seed,
        ..Default::default()
    };
    WorldModel::new(
        config,
        WorldDims {
            token_hw: [4, 4],
            dim: 4,
            codes: 5,
        },
    )
}

/// Finite-difference check of the full stage-2 objective with respect to
/// every parameter of [`tiny_world_model`], on a random window.
pub fn grad_check_tiny_world(seed: u64, eps: f64, fault: Option<&str>) -> Result<GradCheckReport> {
    let mut m = tiny_world_model(seed)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0x77);
    let t = m.config.window();
    let (s, c, n) = (m.base_sites(), m.dims.dim, m.dims.codes);
    let mut rand = |shape: &[usize]| {
        let k = shape.iter().product();
        Tensor::new(shape, (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let tokens = rand(&[t, s, c])?;
    let disp = rand(&[t, 3])?;
    let gt = rand(&[t, 2])?;
    let targets: Vec<usize> = (0..t * s).map(|_| rng.random_range(0..n)).collect();
    let model = m.clone();
    grad_check_store(
        |g| {
            let out = model.forward(g, &tokens, &disp)?;
            Ok(world_loss(g, out.logits, &targets, out.ego, &gt, 1.0)?.0)
        },
        &mut m.params,
        eps,
        fault,
    )
}
