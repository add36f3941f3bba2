//! Imputation and the evaluation reports built on a trained estimator.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;

use crate::backbone::BackboneParams;
use crate::diffusion::{forward_noise_rows, reverse_step, sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kshot_theorem::{
    error_distribution, expert_count_sweep, fixed_expert_outputs, jensen_check, kshot_average, kshot_ensemble, mix,
    verify_convex_combination, weight_sweep, ConvexLoss, ErrorTable, StepContext, SweepResult,
};
use crate::masking::apply_mask;
use crate::metrics::{evaluate, MetricsReport};
use crate::moe_blocks::HeadGates;
use crate::rng::{self, Rng};
use crate::tensor_core::{Graph, Tensor};

pub struct Imputation {
    pub x_bar: Tensor,
    /// Sampler output.
    pub reconstruction: Tensor,
    /// Observed entries from the input, missing entries from the sampler.
    pub imputed: Tensor,
    pub full: MetricsReport,
    /// Metrics over missing entries only; an error when nothing is missing.
    pub missing: Result<MetricsReport>,
}

/// Reconstructs `signals` [B, C, T] from the entries `mask` keeps, averaging
/// `shots` sampler runs seeded from `seed`.
pub fn impute(
    params: &BackboneParams,
    sched: &NoiseSchedule,
    signals: &Tensor,
    mask: &Tensor,
    shots: usize,
    seed: u64,
) -> Result<Imputation> {
    let x_bar = apply_mask(signals, mask)?;
    let reconstruction = kshot_average(params, &x_bar, sched, shots, seed)?;
    let imputed = x_bar.add(&reconstruction.zip_map(mask, |v, m| v * (1.0 - m))?)?;
    let full = evaluate(signals, &imputed, None)?;
    let missing = evaluate(signals, &reconstruction, Some(mask));
    Ok(Imputation {
        x_bar,
        reconstruction,
        imputed,
        full,
        missing,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KshotRow {
    pub k: usize,
    pub prd: f64,
    pub ssd: f64,
    pub mad: f64,
    pub wall_seconds: f64,
}

pub fn kshot_csv(rows: &[KshotRow]) -> String {
    let mut out = String::from("K,prd,ssd,mad,wall_seconds\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{:.6}", r.k, r.prd, r.ssd, r.mad, r.wall_seconds).unwrap();
    }
    out
}

/// Missing-region metrics of K-shot averaging for each K in `ks`.
pub fn compare_kshot(
    params: &BackboneParams,
    sched: &NoiseSchedule,
    signals: &Tensor,
    mask: &Tensor,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<KshotRow>> {
    let x_bar = apply_mask(signals, mask)?;
    ks.iter()
        .map(|&k| {
            let start = Instant::now();
            let avg = kshot_average(params, &x_bar, sched, k, seed)?;
            let wall_seconds = start.elapsed().as_secs_f64();
            let m = evaluate(signals, &avg, Some(mask))?.aggregate;
            Ok(KshotRow {
                k,
                prd: m.prd,
                ssd: m.ssd,
                mad: m.mad,
                wall_seconds,
            })
        })
        .collect()
}

/// Whose errors an error-distribution table shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorSource {
    /// Independent sampler runs, combined by averaging.
    Shots(usize),
    /// The head pinned to each expert, combined by the router-gated model.
    Experts,
}

pub fn error_report(
    params: &BackboneParams,
    sched: &NoiseSchedule,
    signals: &Tensor,
    mask: &Tensor,
    source: ErrorSource,
    sample_index: usize,
    channel: usize,
    seed: u64,
) -> Result<ErrorTable> {
    let x_bar = apply_mask(signals, mask)?;
    match source {
        ErrorSource::Shots(k) => {
            let e = kshot_ensemble(params, &x_bar, sched, k, seed)?;
            error_distribution(signals, &e.shots, &e.mean()?, sample_index, channel, "shot", "average")
        }
        ErrorSource::Experts => {
            let outs = fixed_expert_outputs(params, &x_bar, sched, seed)?;
            let fused = sample(params, &x_bar, sched, &mut rng::seeded(seed))?;
            error_distribution(signals, &outs, &fused, sample_index, channel, "expert", "fusion")
        }
    }
}

/// One randomized check of the fusion identities on real estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremTrial {
    pub trial: usize,
    pub t: usize,
    /// Model output with fixed gates vs the same mixture of per-expert outputs.
    pub fusion_gap: f64,
    /// Step of the mixture vs mixture of the steps.
    pub convex_gap: f64,
    pub jensen_mse: f64,
    pub jensen_mae: f64,
    pub best_loss: f64,
    pub uniform_loss: f64,
}

impl TheoremTrial {
    pub fn passed(&self) -> bool {
        self.fusion_gap <= 1e-10
            && self.convex_gap <= 1e-10
            && self.jensen_mse >= -1e-12
            && self.jensen_mae >= -1e-12
            && self.best_loss <= self.uniform_loss + 1e-12
    }
}

pub struct TheoremReport {
    pub trials: Vec<TheoremTrial>,
    pub sweep: Vec<(usize, SweepResult)>,
}

impl TheoremReport {
    pub fn sweep_monotone(&self) -> bool {
        self.sweep.windows(2).all(|w| w[1].1.best_loss <= w[0].1.best_loss + 1e-12)
    }

    pub fn passed(&self) -> bool {
        self.trials.iter().all(TheoremTrial::passed) && self.sweep_monotone()
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial,t,fusion_gap,convex_gap,jensen_mse,jensen_mae,best_loss,uniform_loss,pass\n");
        for r in &self.trials {
            writeln!(
                out,
                "{},{},{:e},{:e},{},{},{},{},{}",
                r.trial,
                r.t,
                r.fusion_gap,
                r.convex_gap,
                r.jensen_mse,
                r.jensen_mae,
                r.best_loss,
                r.uniform_loss,
                r.passed()
            )
            .unwrap();
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("K,best_loss,uniform_loss,weights\n");
        for (k, r) in &self.sweep {
            let w: Vec<String> = r.best_weights.iter().map(f64::to_string).collect();
            writeln!(out, "{k},{},{},{}", r.best_loss, r.uniform_loss, w.join(";")).unwrap();
        }
        out
    }
}

fn estimate(params: &BackboneParams, x_t: &Tensor, x_bar: &Tensor, steps: &[usize], gates: &HeadGates) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.leaf(x_t.clone());
    let b = g.leaf(x_bar.clone());
    let out = params.forward(&mut g, a, b, steps, gates)?;
    Ok(g.value(out).clone())
}

fn random_simplex(k: usize, r: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -r.gen_range(f64::MIN_POSITIVE..1.0).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Checks the fusion identities on the estimator's own per-expert noise
/// estimates. Trial `i` draws from `rng::stream(seed, i)`. The expert-count
/// sweep uses the first trial's pool.
pub fn theorem_check(
    params: &BackboneParams,
    sched: &NoiseSchedule,
    signals: &Tensor,
    mask: &Tensor,
    trials: usize,
    counts: &[usize],
    seed: u64,
) -> Result<TheoremReport> {
    let k = params.head.num_experts();
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > k) {
        return Err(Error::invalid(
            "theorem_check",
            format!("expert count {c} outside 1..={k} (the head has {k} experts)"),
        ));
    }
    if trials == 0 {
        return Err(Error::invalid("theorem_check", "need at least one trial"));
    }
    let x_bar = apply_mask(signals, mask)?;
    let b = signals.dim(0);
    let mut out = Vec::with_capacity(trials);
    let mut sweep = Vec::new();
    for trial in 0..trials {
        let mut r = rng::stream(seed, trial as u64);
        let t = r.gen_range(1..=sched.steps());
        let eps = rng::standard_normal(signals.shape(), &mut r);
        let steps = vec![t; b];
        let x_t = forward_noise_rows(signals, &steps, &eps, sched)?;
        let z = if t > 1 {
            rng::standard_normal(signals.shape(), &mut r)
        } else {
            Tensor::zeros(signals.shape())
        };
        let target = reverse_step(&x_t, &eps, t, sched, &z)?;
        let experts: Vec<Tensor> = (0..k)
            .map(|e| estimate(params, &x_t, &x_bar, &steps, &HeadGates::one_hot(e, k)))
            .collect::<Result<_>>()?;
        let w = random_simplex(k, &mut r);
        let fused = estimate(params, &x_t, &x_bar, &steps, &HeadGates::Fixed(w.clone()))?;
        let fusion_gap = fused.max_abs_diff(&mix(&experts, &w)?)?;
        let convex_gap = verify_convex_combination(&x_t, &experts, &w, t, sched, &z)?;
        let stepped: Vec<Tensor> = experts
            .iter()
            .map(|e| reverse_step(&x_t, e, t, sched, &z))
            .collect::<Result<_>>()?;
        let jensen_mse = jensen_check(&stepped, &w, &target, &ConvexLoss::Mse)?;
        let jensen_mae = jensen_check(&stepped, &w, &target, &ConvexLoss::Mae)?;
        let ctx = StepContext {
            x_t: &x_t,
            t,
            sched,
            z: &z,
            target: &target,
        };
        let best = weight_sweep(&experts, &ctx, &ConvexLoss::Mse, 0.05, None)?;
        if trial == 0 && !counts.is_empty() {
            sweep = expert_count_sweep(&experts, counts, &ctx, &ConvexLoss::Mse, 0.05)?;
        }
        out.push(TheoremTrial {
            trial,
            t,
            fusion_gap,
            convex_gap,
            jensen_mse,
            jensen_mae,
            best_loss: best.best_loss,
            uniform_loss: best.uniform_loss,
        });
    }
    Ok(TheoremReport { trials: out, sweep })
}
