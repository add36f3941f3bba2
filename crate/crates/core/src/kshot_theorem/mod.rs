//! K-shot averaging, and executable checks of the claim that a single
//! gate-weighted fusion of noise estimates is never worse than averaging the
//! outcomes of separate reverse steps.

mod loss;
mod sweep;

pub use loss::ConvexLoss;
pub use sweep::{
    expert_count_sweep, project_simplex, projected_descent, simplex_grid, weight_sweep, StepContext, SweepResult,
    GRID_MAX_EXPERTS, PGD_ITERATIONS, PGD_STEP,
};

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::backbone::BackboneParams;
use crate::diffusion::{reverse_step, sample_gated, NoiseSchedule};
use crate::error::{Error, Result};
use crate::moe_blocks::HeadGates;
use crate::rng;
use crate::tensor_core::Tensor;

const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) fn check_simplex(weights: &[f64], op: &'static str) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid(op, "empty weight vector"));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w >= 0.0)) {
        return Err(Error::invalid(op, format!("weight {w} is negative")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(op, format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// `sum_k w_k x_k`.
pub fn mix(items: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if items.len() != weights.len() || items.is_empty() {
        return Err(Error::invalid(
            "mix",
            format!("{} tensors with {} weights", items.len(), weights.len()),
        ));
    }
    let mut acc = Tensor::zeros(items[0].shape());
    for (x, &w) in items.iter().zip(weights) {
        acc.axpy(w, x)?;
    }
    Ok(acc)
}

/// Reconstructions from independent runs of the sampler.
#[derive(Clone, Debug)]
pub struct ShotEnsemble {
    pub shots: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

impl ShotEnsemble {
    pub fn mean(&self) -> Result<Tensor> {
        Tensor::mean_of(&self.shots)
    }
}

/// Runs the sampler once per `(seed, stream)` pair, in parallel. Shot `i`
/// draws from `rng::stream(seeds[i], streams[i])`.
fn run_shots(
    params: &BackboneParams,
    x_bar: &Tensor,
    sched: &NoiseSchedule,
    gates: &HeadGates,
    draws: &[(u64, u64)],
) -> Result<Vec<Tensor>> {
    draws
        .par_iter()
        .map(|&(seed, stream)| sample_gated(params, x_bar, sched, gates, &mut rng::stream(seed, stream)))
        .collect()
}

/// `k` shots where shot `i` uses stream `i` of `seed`; shot 0 therefore
/// matches `sample` with `rng::seeded(seed)`.
pub fn kshot_ensemble(
    params: &BackboneParams,
    x_bar: &Tensor,
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<ShotEnsemble> {
    if k == 0 {
        return Err(Error::invalid("kshot_average", "need at least one shot"));
    }
    let draws: Vec<(u64, u64)> = (0..k as u64).map(|i| (seed, i)).collect();
    Ok(ShotEnsemble {
        shots: run_shots(params, x_bar, sched, &HeadGates::Router, &draws)?,
        seeds: vec![seed; k],
    })
}

/// Elementwise mean of `k` independent sampler runs.
pub fn kshot_average(params: &BackboneParams, x_bar: &Tensor, sched: &NoiseSchedule, k: usize, seed: u64) -> Result<Tensor> {
    kshot_ensemble(params, x_bar, sched, k, seed)?.mean()
}

/// One shot per listed seed, each from `rng::seeded(seed)`.
pub fn shots_from_seeds(params: &BackboneParams, x_bar: &Tensor, sched: &NoiseSchedule, seeds: &[u64]) -> Result<ShotEnsemble> {
    let draws: Vec<(u64, u64)> = seeds.iter().map(|&s| (s, 0)).collect();
    Ok(ShotEnsemble {
        shots: run_shots(params, x_bar, sched, &HeadGates::Router, &draws)?,
        seeds: seeds.to_vec(),
    })
}

/// Reconstructions with the Fusion MoE head pinned to each expert in turn,
/// all from the same sampler stream.
pub fn fixed_expert_outputs(params: &BackboneParams, x_bar: &Tensor, sched: &NoiseSchedule, seed: u64) -> Result<Vec<Tensor>> {
    let k = params.head.num_experts();
    (0..k)
        .into_par_iter()
        .map(|e| sample_gated(params, x_bar, sched, &HeadGates::one_hot(e, k), &mut rng::seeded(seed)))
        .collect()
}

/// Largest entrywise gap between stepping once with the weighted estimate
/// and weighting the individually stepped results, with `z` shared.
pub fn verify_convex_combination(
    x_t: &Tensor,
    eps_list: &[Tensor],
    weights: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    z: &Tensor,
) -> Result<f64> {
    check_simplex(weights, "verify_convex_combination")?;
    let fused = reverse_step(x_t, &mix(eps_list, weights)?, t, sched, z)?;
    let stepped: Vec<Tensor> = eps_list
        .iter()
        .map(|e| reverse_step(x_t, e, t, sched, z))
        .collect::<Result<_>>()?;
    fused.max_abs_diff(&mix(&stepped, weights)?)
}

/// `sum_k w_k L(p_k - target) - L(sum_k w_k p_k - target)`; never negative
/// for a convex loss.
pub fn jensen_check(points: &[Tensor], weights: &[f64], target: &Tensor, loss: &ConvexLoss) -> Result<f64> {
    check_simplex(weights, "jensen_check")?;
    let mut separate = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        separate += w * loss.eval(&p.sub(target)?);
    }
    let fused = loss.eval(&mix(points, weights)?.sub(target)?);
    Ok(separate - fused)
}

/// Signed per-timestamp errors of several reconstructions of one channel,
/// plus the error of a combined output.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTable {
    pub labels: Vec<String>,
    /// `columns[j][t]` is the error of output `j` at time `t`; the last
    /// column belongs to the combined output.
    pub columns: Vec<Vec<f64>>,
}

impl ErrorTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest gap between the per-timestamp mean of the individual errors
    /// and the combined error.
    pub fn mean_gap(&self) -> f64 {
        let (combined, parts) = self.columns.split_last().expect("table has a combined column");
        (0..self.len())
            .map(|t| {
                let m = parts.iter().map(|c| c[t]).sum::<f64>() / parts.len() as f64;
                (m - combined[t]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for t in 0..self.len() {
            write!(out, "{t}").unwrap();
            for c in &self.columns {
                write!(out, ",{}", c[t]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Errors of each output in `outputs` and of `combined` against `truth`, on
/// channel `channel` of batch row `sample`. Columns are labelled
/// `{prefix}_{i}` and `combined_label`.
pub fn error_distribution(
    truth: &Tensor,
    outputs: &[Tensor],
    combined: &Tensor,
    sample: usize,
    channel: usize,
    prefix: &str,
    combined_label: &str,
) -> Result<ErrorTable> {
    truth.expect_rank(3, "error_distribution", "signals [B, C, T]")?;
    let (b, c, len) = (truth.dim(0), truth.dim(1), truth.dim(2));
    if sample >= b || channel >= c {
        return Err(Error::invalid(
            "error_distribution",
            format!("sample {sample} / channel {channel} outside a [{b}, {c}, {len}] batch"),
        ));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("error_distribution", "no reconstructions given"));
    }
    let offset = (sample * c + channel) * len;
    let column = |x: &Tensor| -> Result<Vec<f64>> {
        truth.expect_same_shape(x, "error_distribution")?;
        Ok((0..len).map(|i| x.data()[offset + i] - truth.data()[offset + i]).collect())
    };
    let mut labels: Vec<String> = (0..outputs.len()).map(|i| format!("{prefix}_{i}")).collect();
    labels.push(combined_label.to_string());
    let mut columns = outputs.iter().map(column).collect::<Result<Vec<_>>>()?;
    columns.push(column(combined)?);
    Ok(ErrorTable { labels, columns })
}

#[cfg(test)]
mod tests;
