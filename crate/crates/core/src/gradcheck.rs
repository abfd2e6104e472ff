//! Central finite-difference checks of reverse-mode gradients.
//!
//! The error reported for each tensor is the norm-wise relative error
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Norms below this are treated as zero when forming relative errors.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// One relative error per checked tensor, in input order.
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.errors.iter().all(|e| *e < tol)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

fn central_difference(x: &mut [f64], h: f64, mut eval: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = eval(x)?;
        x[i] = orig - h;
        let down = eval(x)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Checks `d f / d inputs` where `f` builds a scalar from fresh graph
/// variables holding `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = run(inputs)?;
    g.backward(out)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*v);
        let mut work = inputs.to_vec();
        let mut x = work[k].values().to_vec();
        let numeric = central_difference(&mut x, h, |xs| {
            work[k].values_mut().copy_from_slice(xs);
            let (g, _, out) = run(&work)?;
            Ok(g.value(out).item())
        })?;
        errors.push(relative_error(analytic.values(), &numeric));
    }
    Ok(GradCheck { errors })
}

/// Checks gradients of `f` with respect to the parameters `ids`.
///
/// The analytic gradient is compared with `scale × numeric`; pass `1.0`
/// normally and `-λ` for parameters that sit below a gradient reversal of
/// strength `λ`.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], scale: f64, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::with_trainable(ids.iter().copied());
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let mut work = store.clone();
    let mut errors = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = match g.bound_var(id) {
            Some(v) => g.grad_or_zeros(v),
            None => Tensor::zeros(store.get(id).shape()),
        };
        let mut x = store.get(id).values().to_vec();
        let numeric = central_difference(&mut x, h, |xs| {
            work.get_mut(id).values_mut().copy_from_slice(xs);
            let mut g = Graph::new();
            let out = f(&mut g, &work)?;
            Ok(g.value(out).item())
        })?;
        work.get_mut(id).values_mut().copy_from_slice(store.get(id).values());
        let scaled: Vec<f64> = numeric.iter().map(|n| n * scale).collect();
        errors.push(relative_error(analytic.values(), &scaled));
    }
    Ok(GradCheck { errors })
}
