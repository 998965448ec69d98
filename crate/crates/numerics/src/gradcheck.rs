//! Central finite-difference oracle for autodiff gradients.
//!
//! The oracle only ever calls the forward builder; it never touches
//! [`Graph::backward`], so it stays independent of the code it checks.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Largest relative disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

/// Relative error with a small absolute floor so that near-zero gradients do
/// not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares autodiff against central differences at step `eps` for every
/// coordinate of every input (or the first `max_coords` per input when set).
///
/// `build` receives the graph and one leaf per input and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, max_coords: Option<usize>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out).expect("backward");

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, coords_checked: 0 };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).expect("gradient for input").data().to_vec();
        let n = max_coords.map_or(input.numel(), |m| m.min(input.numel()));
        for c in 0..n {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[c];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.coords_checked += 1;
        }
    }
    report
}
