//! Central finite-difference gradient checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_EPS: f64 = 1e-6;

/// Below this norm both gradients are treated as numerically zero.
const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-input `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, vector norms.
    pub max_rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Relative error between two gradients under the vector 2-norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Compares analytic gradients of the scalar `f(inputs)` with central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = xs.iter().map(|x| t.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let y = f(&mut t, &vs)?;
        Ok(t.value(y).item())
    };

    let mut t = Tape::new();
    let vs = inputs.iter().map(|x| t.input(x.clone())).collect::<Result<Vec<_>>>()?;
    let y = f(&mut t, &vs)?;
    let g = t.backward(y)?;
    let analytic: Vec<Tensor> = vs
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.rows, x.cols)))
        .collect();

    let mut xs = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..xs.len() {
        let mut ng = Tensor::zeros(xs[i].rows, xs[i].cols);
        for k in 0..xs[i].len() {
            let orig = xs[i].data[k];
            xs[i].data[k] = orig + FD_EPS;
            let up = eval(&xs)?;
            xs[i].data[k] = orig - FD_EPS;
            let down = eval(&xs)?;
            xs[i].data[k] = orig;
            ng.data[k] = (up - down) / (2.0 * FD_EPS);
        }
        numeric.push(ng);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(&a.data, &n.data))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        analytic,
        numeric,
    })
}

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    /// Relative error over the concatenation of all parameter gradients.
    pub rel_err: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Compares parameter gradients of the scalar `f(store)` with central differences,
/// perturbing every scalar of every parameter.
pub fn check_param_gradients<F>(store: &ParamStore, f: F) -> Result<ParamGradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut t = Tape::new();
    let y = f(&mut t, &work)?;
    let g = t.backward(y)?;
    t.accumulate_param_grads(&g, &mut work);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let y = f(&mut t, s)?;
        Ok(t.value(y).item())
    };
    let names = work.names().to_vec();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut per_param = Vec::new();
    for name in &names {
        let start = analytic.len();
        let a = work.grad(name)?.cloned();
        let n = work.get(name)?.len();
        for k in 0..n {
            let orig = work.get(name)?.data[k];
            work.get_mut(name)?.data[k] = orig + FD_EPS;
            let up = eval(&work)?;
            work.get_mut(name)?.data[k] = orig - FD_EPS;
            let down = eval(&work)?;
            work.get_mut(name)?.data[k] = orig;
            numeric.push((up - down) / (2.0 * FD_EPS));
            analytic.push(a.as_ref().map_or(0.0, |a| a.data[k]));
        }
        per_param.push((name.clone(), relative_error(&analytic[start..], &numeric[start..])));
    }
    Ok(ParamGradReport {
        rel_err: relative_error(&analytic, &numeric),
        per_param,
    })
}
