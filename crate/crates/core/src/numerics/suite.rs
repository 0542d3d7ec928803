//! The primitive gradient-check suite shared by tests and the `gradcheck`
//! command.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::graph::{Graph, Var};
use super::nn::{self, AttnBias};
use super::params::{ParamId, ParamStore};
use super::{grad_check_store, GradCheckReport, Tensor, MASK_NEG};
use crate::error::Result;

/// One named check of the suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Entries with magnitude in [0.1, 1) and random sign: relative errors are
/// meaningless for gradients that vanish because an input sits at zero.
fn rand_tensor(rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `Σ w ⊙ y` for a fixed random `w`, built from the custom-gradient node only
/// so that a fault in any other primitive shows up solely in its own check.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, g.shape(y));
    let value = g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    g.scalar_loss(y, value, w)
}

struct Case<'a> {
    seed: u64,
    eps: f64,
    fault: Option<&'a str>,
}

impl Case<'_> {
    fn run(&self, inputs: &[&[usize]], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(self.seed);
        let mut store = ParamStore::new(0);
        let ids: Vec<ParamId> = inputs
            .iter()
            .enumerate()
            .map(|(i, s)| store.insert(&format!("x{i}"), rand_tensor(&mut rng, s)))
            .collect();
        grad_check_store(
            |g| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let y = op(g, &vars)?;
                weighted_sum(g, y, self.seed)
            },
            &mut store,
            self.eps,
            self.fault,
        )
    }
}

/// Finite-difference checks of every differentiable primitive plus masked
/// multi-head attention, on random inputs drawn from `seed`.
pub fn primitive_suite(seed: u64, eps: f64, fault: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let c = Case { seed, eps, fault };
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Result<GradCheckReport>| -> Result<()> {
        out.push(SuiteEntry { name, report: r? });
        Ok(())
    };
    push("matmul", c.run(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])))?;
    push("matmul_t", c.run(&[&[4, 3], &[2, 4]], |g, v| g.matmul_t(v[0], v[1], true, true)))?;
    push("bmm", c.run(&[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], false, true)))?;
    push("bmm_ta", c.run(&[&[2, 4, 3], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], true, false)))?;
    push("add", c.run(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])))?;
    push("sub", c.run(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])))?;
    push("mul", c.run(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])))?;
    push("add_tile", c.run(&[&[3, 2, 4], &[2, 4]], |g, v| g.add_tile(v[0], v[1])))?;
    push("scale", c.run(&[&[5]], |g, v| g.scale(v[0], -1.7)))?;
    push("gelu", c.run(&[&[3, 5]], |g, v| g.gelu(v[0])))?;
    push("layer_norm", c.run(&[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2])))?;
    push("softmax", c.run(&[&[3, 5]], |g, v| g.softmax(v[0])))?;
    push("cross_entropy", c.run(&[&[4, 6]], |g, v| g.cross_entropy(v[0], &[1, 0, 5, 2])))?;
    push("reshape", c.run(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])))?;
    push("permute", c.run(&[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])))?;
    push("conv2d", c.run(&[&[6, 5, 2], &[3, 3, 2, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1)))?;
    push(
        "conv_transpose2d",
        c.run(&[&[3, 2, 2], &[2, 4, 4, 3]], |g, v| g.conv_transpose2d(v[0], v[1], 2, 1)),
    )?;
    push("space_to_depth", c.run(&[&[4, 6, 2]], |g, v| g.space_to_depth(v[0])))?;
    push("upsample2x", c.run(&[&[2, 3, 2]], |g, v| g.upsample2x(v[0])))?;
    push("gather_rows", c.run(&[&[5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])))?;
    push("gather_cols", c.run(&[&[2, 5]], |g, v| g.gather_cols(v[0], &[1, 1, 3])))?;
    push("concat_rows", c.run(&[&[2, 3], &[4, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]])))?;
    push("slice_rows", c.run(&[&[5, 2]], |g, v| g.slice_rows(v[0], 1, 3)))?;
    push("sum", c.run(&[&[3, 3]], |g, v| {
        let y = g.sum(v[0])?;
        g.scale(y, 1.0)
    }))?;
    push("mean", c.run(&[&[3, 3]], |g, v| g.mean(v[0])))?;
    let mut mask = Tensor::zeros(&[3, 5]);
    mask.data_mut()[4] = MASK_NEG;
    push(
        "attention",
        c.run(&[&[4, 3, 2], &[4, 5, 2], &[4, 5, 2]], |g, v| {
            nn::attention(g, v[0], v[1], v[2], 2, 2, AttnBias { mask: Some(&mask), table: None })
        }),
    )?;
    Ok(out)
}
