//! Central-difference verification of analytic gradients.

use crate::error::NnError;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const MIN_STEP: f64 = 1e-5;
pub const MAX_STEP: f64 = 1e-2;

/// Largest relative disagreement between the analytic gradient of `f` at
/// `input` and the central difference `(f(x+h) - f(x-h)) / 2h`, measured as
/// `|analytic - numeric| / max(|numeric|, 1e-6)`.
///
/// When a ReLU or max-pool kink lies inside `[x-h, x+h]` the central
/// difference averages two slopes, so each element is scored against the
/// closest of the central and the two one-sided differences. At smooth
/// points all three agree to `O(h)`.
pub fn grad_check<F, E>(f: F, input: &Tensor<f64>, h: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId, E>,
    E: From<NnError>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(input), h)
}

/// [`grad_check`] over several leaves at once, e.g. an input and every
/// network parameter.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, E>,
    E: From<NnError>,
{
    if !(MIN_STEP..=MAX_STEP).contains(&h) {
        return Err(NnError::GradCheck(format!("step {h} outside [{MIN_STEP}, {MAX_STEP}]")).into());
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).numel() != 1 {
            return Err(NnError::NonScalarLoss(g.shape(out).to_vec()).into());
        }
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get_or_zeros(id, t.numel()))
        .collect();

    let base = eval(inputs)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let gap = [numeric, (up - base) / h, (base - down) / h]
                .iter()
                .map(|n| (a - n).abs())
                .fold(f64::INFINITY, f64::min);
            let rel = gap / numeric.abs().max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
