//! Central finite-difference oracle for tape gradients.

use crate::error::Result;
use crate::tensor_core::{Graph, NodeId, Tensor};

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / 1f64.max(numeric.abs()).max(analytic.abs())
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).data()[0])
}

/// Compares the tape gradient of the scalar function built by `f` at `point`
/// against central differences with step `h`, returning the largest
/// per-coordinate relative error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.wrt(x);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(numeric, analytic.data()[i]));
    }
    Ok(worst)
}
