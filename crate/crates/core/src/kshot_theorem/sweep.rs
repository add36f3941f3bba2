//! Search over simplex weights for the fused noise estimate that minimizes
//! the loss of one reverse step.

use crate::diffusion::{reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kshot_theorem::{check_simplex, mix, ConvexLoss};
use crate::tensor_core::Tensor;

/// Largest expert count searched by exhaustive grid.
pub const GRID_MAX_EXPERTS: usize = 4;
pub const PGD_ITERATIONS: usize = 200;
pub const PGD_STEP: f64 = 0.1;

/// One reverse step with everything but the noise estimate held fixed.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub x_t: &'a Tensor,
    pub t: usize,
    pub sched: &'a NoiseSchedule,
    /// Injected noise shared by every candidate.
    pub z: &'a Tensor,
    pub target: &'a Tensor,
}

impl StepContext<'_> {
    /// Loss of the step taken with the `weights`-mixture of `eps`.
    pub fn loss_at(&self, eps: &[Tensor], weights: &[f64], loss: &ConvexLoss) -> Result<f64> {
        let stepped = reverse_step(self.x_t, &mix(eps, weights)?, self.t, self.sched, self.z)?;
        Ok(loss.eval(&stepped.sub(self.target)?))
    }

    fn gradient(&self, eps: &[Tensor], weights: &[f64], loss: &ConvexLoss) -> Result<Vec<f64>> {
        let b = self.sched.coefficients(self.t)?.b;
        let stepped = reverse_step(self.x_t, &mix(eps, weights)?, self.t, self.sched, self.z)?;
        let dr: Vec<f64> = stepped
            .sub(self.target)?
            .data()
            .iter()
            .map(|&r| loss.derivative(r))
            .collect();
        let n = dr.len() as f64;
        Ok(eps
            .iter()
            .map(|e| b * e.data().iter().zip(&dr).map(|(a, d)| a * d).sum::<f64>() / n)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub best_weights: Vec<f64>,
    pub best_loss: f64,
    pub uniform_loss: f64,
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if ui - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Every point of the simplex grid with spacing `1 / divisions`.
pub fn simplex_grid(k: usize, divisions: usize) -> Vec<Vec<f64>> {
    fn fill(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for part in 0..=left {
            prefix.push(part);
            fill(k, left - part, prefix, out);
            prefix.pop();
        }
    }
    let mut parts = Vec::new();
    fill(k, divisions, &mut Vec::with_capacity(k), &mut parts);
    parts
        .into_iter()
        .map(|p| p.into_iter().map(|c| c as f64 / divisions as f64).collect())
        .collect()
}

/// Minimizes the step loss over simplex weights: exhaustive grid at spacing
/// `grid_resolution` for up to four experts, projected gradient descent
/// beyond. Uniform weights and `warm_start` are always candidates, so the
/// result never exceeds either.
pub fn weight_sweep(
    expert_eps: &[Tensor],
    ctx: &StepContext<'_>,
    loss: &ConvexLoss,
    grid_resolution: f64,
    warm_start: Option<&[f64]>,
) -> Result<SweepResult> {
    let k = expert_eps.len();
    if k == 0 {
        return Err(Error::invalid("weight_sweep", "no experts"));
    }
    let uniform = vec![1.0 / k as f64; k];
    let uniform_loss = ctx.loss_at(expert_eps, &uniform, loss)?;
    let mut best = (uniform.clone(), uniform_loss);
    let mut consider = |w: Vec<f64>| -> Result<()> {
        let l = ctx.loss_at(expert_eps, &w, loss)?;
        if l < best.1 {
            best = (w, l);
        }
        Ok(())
    };
    if let Some(w) = warm_start {
        if w.len() != k {
            return Err(Error::invalid("weight_sweep", format!("warm start has {} weights for {k} experts", w.len())));
        }
        check_simplex(w, "weight_sweep")?;
        consider(w.to_vec())?;
    }
    if k <= GRID_MAX_EXPERTS {
        let divisions = (1.0 / grid_resolution).round();
        if !(grid_resolution > 0.0) || divisions < 1.0 || (divisions * grid_resolution - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "weight_sweep",
                format!("grid resolution {grid_resolution} must divide 1 evenly"),
            ));
        }
        for w in simplex_grid(k, divisions as usize) {
            consider(w)?;
        }
    } else {
        let start = warm_start.map(<[f64]>::to_vec).unwrap_or_else(|| uniform.clone());
        let (w, _) = projected_descent(expert_eps, ctx, loss, start)?;
        consider(w)?;
    }
    Ok(SweepResult {
        best_weights: best.0,
        best_loss: best.1,
        uniform_loss,
    })
}

/// Projected gradient descent from `start`; the step halves whenever a move
/// fails to improve.
pub fn projected_descent(
    expert_eps: &[Tensor],
    ctx: &StepContext<'_>,
    loss: &ConvexLoss,
    start: Vec<f64>,
) -> Result<(Vec<f64>, f64)> {
    let mut w = start;
    let mut current = ctx.loss_at(expert_eps, &w, loss)?;
    let mut step = PGD_STEP;
    for _ in 0..PGD_ITERATIONS {
        let grad = ctx.gradient(expert_eps, &w, loss)?;
        let moved: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
        let candidate = project_simplex(&moved);
        let l = ctx.loss_at(expert_eps, &candidate, loss)?;
        if l < current {
            w = candidate;
            current = l;
        } else {
            step *= 0.5;
        }
    }
    Ok((w, current))
}

/// Sweeps nested prefixes of one expert pool. Each count is warm-started from
/// the previous optimum padded with zeros, so losses never increase with the
/// count.
pub fn expert_count_sweep(
    pool: &[Tensor],
    counts: &[usize],
    ctx: &StepContext<'_>,
    loss: &ConvexLoss,
    grid_resolution: f64,
) -> Result<Vec<(usize, SweepResult)>> {
    let mut out: Vec<(usize, SweepResult)> = Vec::with_capacity(counts.len());
    for &k in counts {
        if k == 0 || k > pool.len() {
            return Err(Error::invalid("expert_count_sweep", format!("count {k} outside 1..={}", pool.len())));
        }
        let warm = out.last().filter(|(prev, _)| *prev <= k).map(|(_, r)| {
            let mut w = r.best_weights.clone();
            w.resize(k, 0.0);
            w
        });
        let r = weight_sweep(&pool[..k], ctx, loss, grid_resolution, warm.as_deref())?;
        out.push((k, r));
    }
    Ok(out)
}
