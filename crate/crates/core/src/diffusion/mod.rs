//! Conditional denoising diffusion: schedule, forward corruption, the affine
//! reverse update, the training objective and the ancestral sampler.

mod schedule;

pub use schedule::{make_schedule, NoiseSchedule, ReverseCoefficients};

use rand::Rng as _;

use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::masking::apply_mask;
use crate::moe_blocks::HeadGates;
use crate::rng::{self, Rng};
use crate::tensor_core::{Graph, Tensor};

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t, "forward_noise")?;
    x0.expect_same_shape(eps, "forward_noise")?;
    let ab = sched.alpha_bar()[t - 1];
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| s0 * x + s1 * e)
}

/// Forward corruption where batch row `b` uses step `steps[b]`.
pub fn forward_noise_rows(x0: &Tensor, steps: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.expect_same_shape(eps, "forward_noise")?;
    if x0.rank() == 0 || x0.dim(0) != steps.len() {
        return Err(Error::shape(
            "forward_noise",
            format!("{} steps for leading axis of {:?}", steps.len(), x0.shape()),
        ));
    }
    let mut out = x0.clone();
    for (b, &t) in steps.iter().enumerate() {
        sched.check_step(t, "forward_noise")?;
        let ab = sched.alpha_bar()[t - 1];
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, &e) in out.row_mut(b).iter_mut().zip(eps.row(b)) {
            *o = s0 * *o + s1 * e;
        }
    }
    Ok(out)
}

/// `x_{t-1} = A(t) x_t + B(t) eps_hat + sigma(t) z`.
pub fn reverse_step(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    let c = sched.coefficients(t)?;
    x_t.expect_same_shape(eps_hat, "reverse_step")?;
    x_t.expect_same_shape(z, "reverse_step")?;
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &zz)| c.a * x + c.b * e + c.sigma * zz)
        .collect();
    Tensor::from_vec(x_t.shape().to_vec(), data)
}

/// One draw of the denoising objective.
pub struct TrainSample {
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub x_t: Tensor,
    pub x_bar: Tensor,
}

/// Draws per-row steps uniformly in `1..=T` and standard normal noise, and
/// builds the corrupted signal and the condition.
pub fn draw_train_sample(batch: &Tensor, mask: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<TrainSample> {
    batch.expect_rank(3, "train_step", "batch [B, C, T]")?;
    let x_bar = apply_mask(batch, mask)?;
    let steps: Vec<usize> = (0..batch.dim(0)).map(|_| rng.gen_range(1..=sched.steps())).collect();
    let eps = rng::standard_normal(batch.shape(), rng);
    let x_t = forward_noise_rows(batch, &steps, &eps, sched)?;
    Ok(TrainSample { steps, eps, x_t, x_bar })
}

/// Loss and named parameter gradients for one random draw of the objective.
pub fn train_step(
    params: &BackboneParams,
    batch: &Tensor,
    mask: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let s = draw_train_sample(batch, mask, sched, rng)?;
    params.loss_and_grads(&s.x_t, &s.x_bar, &s.steps, &s.eps)
}

/// Ancestral sampler driven by an arbitrary noise estimator `estimate(x_t, t)`.
/// Draws `x_T` first, then one `z` per step for `t = T..2`; the last step
/// injects no noise.
pub fn sample_with<F>(mut estimate: F, shape: &[usize], sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = rng::standard_normal(shape, rng);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = estimate(&x, t)?;
        let z = if t > 1 {
            rng::standard_normal(shape, rng)
        } else {
            Tensor::zeros(shape)
        };
        x = reverse_step(&x, &eps_hat, t, sched, &z)?;
    }
    if !x.is_finite() {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    Ok(x)
}

pub fn sample(params: &BackboneParams, x_bar: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    sample_gated(params, x_bar, sched, &HeadGates::Router, rng)
}

/// Sampler with explicit Fusion MoE head gates.
pub fn sample_gated(
    params: &BackboneParams,
    x_bar: &Tensor,
    sched: &NoiseSchedule,
    gates: &HeadGates,
    rng: &mut Rng,
) -> Result<Tensor> {
    let xb = x_bar.clone();
    sample_with(
        |x_t, t| {
            let mut g = Graph::new();
            let xt = g.leaf(x_t.clone());
            let cond = g.leaf(xb.clone());
            let out = params.forward(&mut g, xt, cond, &vec![t; x_t.dim(0)], gates)?;
            Ok(g.value(out).clone())
        },
        x_bar.shape(),
        sched,
        rng,
    )
}
