//! Finite-difference audit of every differentiable layer, in isolation and
//! through the full estimator loss.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::Result;
use crate::moe_blocks::{
    param_gradcheck, BridgeParams, ConvParams, FusionMoeParams, GateMode, HeadGates, LinearParams, Params,
    RfamoeParams,
};
use crate::rng::{self, Rng};
use crate::tensor_core::{finite_diff_check, Graph, NodeId, Padding, Tensor, DEFAULT_STEP};

/// Worst relative error allowed by the audit.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: String,
    pub points: usize,
    pub max_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }
}

pub fn report_csv(checks: &[LayerCheck]) -> String {
    let mut out = String::from("layer,points,max_rel_error,pass\n");
    for c in checks {
        writeln!(out, "{},{},{:e},{}", c.layer, c.points, c.max_error, c.passed()).unwrap();
    }
    out
}

#[derive(Clone)]
struct NoParams;

impl Params for NoParams {
    fn visit<'a>(&'a self, _: &str, _: &mut dyn FnMut(&str, &'a Tensor)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Tensor)) {}
}

/// Scalar `sum(out * proj)` so every output entry carries a distinct weight.
fn project(g: &mut Graph, out: NodeId, proj: &Tensor) -> Result<NodeId> {
    let p = g.leaf(proj.clone());
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

/// Worst error over the input and every parameter of one layer at one point.
fn check_point<P, F>(params: &P, input: &Tensor, forward: F, rng: &mut Rng) -> Result<f64>
where
    P: Params + Clone,
    F: Fn(&mut Graph, &P, NodeId) -> Result<NodeId>,
{
    let shape = {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let out = forward(&mut g, params, x)?;
        g.value(out).shape().to_vec()
    };
    let proj = rng::standard_normal(&shape, rng);
    let mut worst = finite_diff_check(
        |g, x| {
            let out = forward(g, params, x)?;
            project(g, out, &proj)
        },
        input,
        DEFAULT_STEP,
    )?;
    for name in params.names() {
        let err = param_gradcheck(params, &name, DEFAULT_STEP, |g, p| {
            let x = g.leaf(input.clone());
            let out = forward(g, p, x)?;
            project(g, out, &proj)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn run<F>(layer: &str, points: usize, seed: u64, mut point: F) -> Result<LayerCheck>
where
    F: FnMut(&mut Rng) -> Result<f64>,
{
    let mut max_error = 0.0f64;
    for i in 0..points {
        let mut r = rng::stream(seed, i as u64);
        max_error = max_error.max(point(&mut r)?);
    }
    Ok(LayerCheck {
        layer: layer.to_string(),
        points,
        max_error,
    })
}

#[derive(Clone)]
struct NormParams {
    gamma: Tensor,
    beta: Tensor,
}

impl Params for NormParams {
    fn visit<'a>(&'a self, _: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

fn randomize<P: Params>(mut p: P, r: &mut Rng) -> P {
    p.visit_mut("", &mut |_, t| *t = rng::standard_normal(t.shape(), r).scale(0.5));
    p
}

/// Checks each layer at `points` random draws of inputs and parameters.
pub fn layer_suite(points: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    let n = |r: &mut Rng, shape: &[usize]| rng::standard_normal(shape, r);
    Ok(vec![
        run("conv1d", points, seed, |r| {
            let size = r.gen_range(1..=4);
            let padding = if r.gen::<bool>() { Padding::Same } else { Padding::Valid };
            let p = randomize(ConvParams::zeros(3, 2, size), r);
            let x = n(r, &[2, 2, 7]);
            check_point(&p, &x, |g, p, x| {
                let (w, b) = (g.param(&p.weight), g.param(&p.bias));
                g.conv1d(x, w, Some(b), padding)
            }, r)
        })?,
        run("instance_norm", points, seed ^ 1, |r| {
            let p = NormParams {
                gamma: n(r, &[3]),
                beta: n(r, &[3]),
            };
            let x = n(r, &[2, 3, 6]);
            check_point(&p, &x, |g, p, x| {
                let (gamma, beta) = (g.param(&p.gamma), g.param(&p.beta));
                g.instance_norm(x, gamma, beta, 1e-5)
            }, r)
        })?,
        run("gelu", points, seed ^ 2, |r| {
            let x = n(r, &[4, 5]).scale(2.0);
            check_point(&NoParams, &x, |g, _, x| Ok(g.gelu(x)), r)
        })?,
        run("softmax", points, seed ^ 3, |r| {
            let x = n(r, &[3, 5]);
            check_point(&NoParams, &x, |g, _, x| g.softmax(x), r)
        })?,
        run("linear", points, seed ^ 4, |r| {
            let p = randomize(LinearParams::zeros(3, 4), r);
            let x = n(r, &[2, 4]);
            check_point(&p, &x, |g, p, x| {
                let (w, b) = (g.param(&p.weight), g.param(&p.bias));
                g.linear(x, w, Some(b))
            }, r)
        })?,
        run("mean_over_time", points, seed ^ 5, |r| {
            let x = n(r, &[2, 3, 5]);
            check_point(&NoParams, &x, |g, _, x| g.mean_over_time(x), r)
        })?,
        run("mse", points, seed ^ 6, |r| {
            let x = n(r, &[2, 6]);
            let target = n(r, &[2, 6]);
            check_point(&NoParams, &x, |g, _, x| g.mse(x, &target), r)
        })?,
        run("rfamoe", points, seed ^ 7, |r| {
            let mode = if r.gen::<bool>() { GateMode::Renormalized } else { GateMode::RawProbability };
            let in_width = if r.gen::<bool>() { 4 } else { 2 };
            let mut p = RfamoeParams::init(in_width, 4, &[1, 3], 2, r)?;
            p.router = randomize(p.router, r);
            p.norm_gamma = n(r, &[4]);
            p.norm_beta = n(r, &[4]);
            let x = n(r, &[2, in_width, 8]);
            check_point(&p, &x, |g, p, x| p.forward(g, x, 2, mode), r)
        })?,
        run("bridge", points, seed ^ 8, |r| {
            let p = randomize(BridgeParams::zeros(4, 6), r);
            let x = n(r, &[4, 4, 5]);
            let steps = [r.gen_range(1..=40), r.gen_range(1..=40)];
            check_point(&p, &x, |g, p, x| p.forward(g, x, &steps, 2), r)
        })?,
        run("fusion_moe", points, seed ^ 9, |r| {
            let p = randomize(FusionMoeParams::zeros(4, 3), r);
            let x = n(r, &[2, 4, 6]);
            check_point(&p, &x, |g, p, x| p.forward(g, x, &HeadGates::Router), r)
        })?,
    ])
}

/// Configuration of the full-loss check: L = 4, one level, K = 2, T = 16.
pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        channels: 2,
        width: 4,
        depth: 1,
        kernels: vec![3, 5],
        head_experts: 2,
        d_emb: 8,
        gate_mode: GateMode::Renormalized,
    }
}

/// Every parameter of the tiny estimator through the denoising loss.
pub fn backbone_check(points: usize, seed: u64) -> Result<LayerCheck> {
    run("backbone_loss", points, seed, |r| {
        let p = BackboneParams::init(&tiny_backbone_config(), r)?;
        let x_t = rng::standard_normal(&[1, 2, 16], r);
        let x_bar = rng::standard_normal(&[1, 2, 16], r);
        let eps = rng::standard_normal(&[1, 2, 16], r);
        let t = r.gen_range(1..=10);
        let mut worst = 0.0f64;
        for name in p.names() {
            let err = param_gradcheck(&p, &name, DEFAULT_STEP, |g, q| q.loss_node(g, &x_t, &x_bar, &[t], &eps))?;
            worst = worst.max(err);
        }
        Ok(worst)
    })
}
