use crate::error::{Error, Result};
use crate::moe_blocks::params::LinearParams;
use crate::tensor_core::{linear, mean_over_time, softmax, Tensor};

/// Outcome of top-1 routing for a batch of feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Selected expert per feature map.
    pub index: Vec<usize>,
    /// Gate applied to the selected expert (renormalized: always 1).
    pub gate: Vec<f64>,
    /// Full softmax over experts, [N, E].
    pub probs: Tensor,
}

/// Router logits from time-averaged features: [N, L_in, T] -> [N, E].
pub fn router_logits(features: &Tensor, router: &LinearParams) -> Result<Tensor> {
    let pooled = mean_over_time(features)?;
    linear(&pooled, &router.weight, Some(&router.bias))
}

/// Index of the largest value; exact ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top1_from_logits(logits: &Tensor) -> Result<Vec<usize>> {
    logits.expect_rank(2, "route_top1", "logits [N, E]")?;
    if logits.dim(1) == 0 {
        return Err(Error::invalid("route_top1", "router has no experts"));
    }
    Ok((0..logits.dim(0)).map(|n| argmax(logits.row(n))).collect())
}

/// Top-1 routing: mean-pool over time, apply the router, pick the argmax.
pub fn route_top1(features: &Tensor, router: &LinearParams) -> Result<Routing> {
    let logits = router_logits(features, router)?;
    let index = top1_from_logits(&logits)?;
    Ok(Routing {
        gate: vec![1.0; index.len()],
        index,
        probs: softmax(&logits)?,
    })
}
