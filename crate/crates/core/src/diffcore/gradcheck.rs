//! Central finite-difference oracle for the analytic gradients.

use super::array::Array;
use super::graph::{DiffError, DiffResult, Graph, ValueId};
use super::paramstore::{ParamBinding, ParamStore};

/// Max over coordinates of |analytic - central| / max(1, |central|), for a
/// scalar function of a single array argument.
pub fn grad_check<F>(f: F, point: &Array, eps: f64) -> DiffResult<f64>
where
    F: Fn(&mut Graph, ValueId) -> DiffResult<ValueId>,
{
    let mut graph = Graph::new();
    let x = graph.leaf(point.clone(), true);
    let loss = f(&mut graph, x)?;
    let grads = graph.backward(loss)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let numeric = central_difference(&f, point, i, eps)?;
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn central_difference<F>(f: &F, point: &Array, coord: usize, eps: f64) -> DiffResult<f64>
where
    F: Fn(&mut Graph, ValueId) -> DiffResult<ValueId>,
{
    let eval = |delta: f64| -> DiffResult<f64> {
        let mut probe = point.clone();
        probe.data_mut()[coord] += delta;
        let mut graph = Graph::new();
        let x = graph.leaf(probe, false);
        let loss = f(&mut graph, x)?;
        Ok(graph.value(loss).item())
    };
    let hi = eval(eps)?;
    let lo = eval(-eps)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(DiffError::Invalid(format!(
            "non-finite probe value at coordinate {coord}"
        )));
    }
    Ok((hi - lo) / (2.0 * eps))
}

/// Finite-difference check of a scalar loss against every coordinate of the
/// named trainable parameters in a store. Used for composite losses where the
/// function of interest is parameterized by the whole model.
pub fn grad_check_params<F>(
    params: &ParamStore,
    names: &[String],
    f: F,
    eps: f64,
) -> DiffResult<f64>
where
    F: Fn(&mut Graph, &ParamBinding) -> DiffResult<ValueId>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let binding = params.bind_all(&mut graph);
    let loss = f(&mut graph, &binding)?;
    let grads = graph.backward(loss)?;
    let analytic = binding.extract_grads(&graph, &grads, names);

    let mut worst: f64 = 0.0;
    for name in names {
        let len = params.get(name).len();
        for coord in 0..len {
            let eval = |delta: f64| -> DiffResult<f64> {
                let mut perturbed = params.clone();
                perturbed.get_mut(name).data_mut()[coord] += delta;
                let mut g = Graph::new();
                let b = perturbed.bind(&mut g, |_| false);
                let l = f(&mut g, &b)?;
                Ok(g.value(l).item())
            };
            let hi = eval(eps)?;
            let lo = eval(-eps)?;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(DiffError::Invalid(format!(
                    "non-finite probe for {name}[{coord}]"
                )));
            }
            let numeric = (hi - lo) / (2.0 * eps);
            let err = (analytic[name].data()[coord] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
