//! Finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check: the worst relative error and where it sits.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks a scalar function of plain tensors. `f` receives one graph leaf per
/// entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new(0);
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(&format!("p{i}"), t.clone()))
        .collect();
    let report = grad_check_store(
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            f(g, &vars)
        },
        &mut store,
        eps,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// Checks a scalar function of every parameter in `store` (central
/// differences with step `eps`). `fault` names an op whose backward is
/// sign-flipped, for exercising the checker itself.
pub fn grad_check_store<F>(f: F, store: &mut ParamStore, eps: f64, fault: Option<&str>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::with_params(store).with_backward_fault(fault);
        let loss = f(&mut g)?;
        check_finite(g.value(loss).item())?;
        let grads = g.backward(loss)?;
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (id, t) in g.param_grads(&grads) {
            out[id.index()] = t;
        }
        out
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let v = g.value(loss).item();
        check_finite(v)?;
        Ok(v)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[id.index()].data()[j];
            let e = rel_error(a, numeric);
            if e > report.max_rel_error || report.worst_param.is_empty() {
                report = GradCheckReport {
                    max_rel_error: e.max(report.max_rel_error),
                    worst_param: store.name(id).to_string(),
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("grad_check objective".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let e = grad_check(|g, v| g.mul(v[0], v[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn sign_flip_is_caught() {
        let mut store = ParamStore::new(0);
        let id = store.insert("x", Tensor::scalar(3.0));
        let r = grad_check_store(
            |g| {
                let x = g.param(id);
                g.mul(x, x)
            },
            &mut store,
            1e-5,
            Some("mul"),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.99);
        assert_eq!(r.worst_param, "x");
    }

    #[test]
    fn non_finite_objective_errors() {
        let r = grad_check(
            |g, v| {
                let y = g.scale(v[0], f64::INFINITY)?;
                g.sum(y)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(r.is_err());
    }
}
