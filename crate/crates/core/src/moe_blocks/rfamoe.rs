//! Receptive-field adaptive MoE block.
//!
//! Each feature map is routed to exactly one convolution expert; experts
//! differ in kernel size. The routed output is instance-normalized, passed
//! through a GELU-gated product of its two channel halves, projected back to
//! full width, mixed across all signal channels of a sample with a kernel-1
//! convolution, and added to the (possibly projected) block input.
//!
//! Feature maps are laid out channels-first, `[N, L, T]` with `N = B * C`.

use crate::error::{Error, Result};
use crate::moe_blocks::params::{join, ConvParams, GateMode, LinearParams, Params};
use crate::moe_blocks::router::{router_logits, top1_from_logits};
use crate::rng::Rng;
use crate::tensor_core::ops::DEFAULT_NORM_EPS;
use crate::tensor_core::{Graph, NodeId, Padding, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RfamoeParams {
    /// Expert `e`: weight [L, L_in, S_e].
    pub experts: Vec<ConvParams>,
    /// [E, L_in].
    pub router: LinearParams,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// Pointwise map from the gated half-width back to L: weight [L, L/2, 1].
    pub gate_proj: ConvParams,
    /// Kernel-1 mixing over all C*L channels of a sample.
    pub fuse: ConvParams,
    /// Present only when the input width differs from L.
    pub residual: Option<ConvParams>,
}

fn check_ladder(kernels: &[usize]) -> Result<()> {
    if kernels.is_empty() {
        return Err(Error::invalid("rfamoe", "at least one expert kernel size required"));
    }
    for (i, &k) in kernels.iter().enumerate() {
        if k % 2 == 0 {
            return Err(Error::invalid("rfamoe", format!("kernel size {k} is not odd")));
        }
        if kernels[..i].contains(&k) {
            return Err(Error::invalid("rfamoe", format!("kernel size {k} repeated")));
        }
    }
    Ok(())
}

fn check_width(width: usize) -> Result<()> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::invalid(
            "rfamoe",
            format!("feature width L must be positive and even for the gated split, got {width}"),
        ));
    }
    Ok(())
}

impl RfamoeParams {
    pub fn init(
        in_width: usize,
        width: usize,
        kernels: &[usize],
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_ladder(kernels)?;
        check_width(width)?;
        let experts = kernels
            .iter()
            .map(|&k| ConvParams::init(width, in_width, k, rng))
            .collect();
        Ok(Self {
            experts,
            router: LinearParams::init(kernels.len(), in_width, rng),
            norm_gamma: Tensor::ones(&[width]),
            norm_beta: Tensor::zeros(&[width]),
            gate_proj: ConvParams::init(width, width / 2, 1, rng),
            fuse: ConvParams::init(channels * width, channels * width, 1, rng),
            residual: (in_width != width).then(|| ConvParams::init(width, in_width, 1, rng)),
        })
    }

    /// Every tensor zero, norm gamma included.
    pub fn zeros(in_width: usize, width: usize, kernels: &[usize], channels: usize) -> Result<Self> {
        check_ladder(kernels)?;
        check_width(width)?;
        Ok(Self {
            experts: kernels.iter().map(|&k| ConvParams::zeros(width, in_width, k)).collect(),
            router: LinearParams::zeros(kernels.len(), in_width),
            norm_gamma: Tensor::zeros(&[width]),
            norm_beta: Tensor::zeros(&[width]),
            gate_proj: ConvParams::zeros(width, width / 2, 1),
            fuse: ConvParams::zeros(channels * width, channels * width, 1),
            residual: (in_width != width).then(|| ConvParams::zeros(width, in_width, 1)),
        })
    }

    pub fn width(&self) -> usize {
        self.norm_gamma.numel()
    }

    pub fn in_width(&self) -> usize {
        self.router.in_features()
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.kernel_size()).collect()
    }

    /// Records the block on `g`. `x` is [N, L_in, T] with `N = B * channels`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        channels: usize,
        mode: GateMode,
    ) -> Result<NodeId> {
        let width = self.width();
        check_width(width)?;
        let xv = g.value(x);
        xv.expect_rank(3, "rfamoe", "input [N, L_in, T]")?;
        let (n, in_width, len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if channels == 0 || n % channels != 0 {
            return Err(Error::shape(
                "rfamoe",
                format!("feature-map axis (axis 0) of size {n} is not divisible by C = {channels}"),
            ));
        }
        if in_width != self.in_width() {
            return Err(Error::shape(
                "rfamoe",
                format!("input width (axis 1) is {in_width}, block expects {}", self.in_width()),
            ));
        }
        if self.fuse.in_channels() != channels * width {
            return Err(Error::shape(
                "rfamoe",
                format!(
                    "fusion conv mixes {} channels but C * L = {}",
                    self.fuse.in_channels(),
                    channels * width
                ),
            ));
        }
        let batch = n / channels;

        let logits = router_logits(xv, &self.router)?;
        let assign = top1_from_logits(&logits)?;
        let experts: Vec<(NodeId, NodeId)> = self.experts.iter().map(|e| e.bind(g)).collect();
        let mut y = g.routed_conv(x, &experts, &assign)?;
        if mode == GateMode::RawProbability {
            let pooled = g.mean_over_time(x)?;
            let (rw, rb) = (g.param(&self.router.weight), g.param(&self.router.bias));
            let logits = g.linear(pooled, rw, Some(rb))?;
            let probs = g.softmax(logits)?;
            let gate = g.gather(probs, &assign)?;
            y = g.scale_rows(y, gate)?;
        }

        let (gamma, beta) = (g.param(&self.norm_gamma), g.param(&self.norm_beta));
        let y = g.instance_norm(y, gamma, beta, DEFAULT_NORM_EPS)?;

        let half = width / 2;
        let a = g.slice_channels(y, 0, half)?;
        let b = g.slice_channels(y, half, half)?;
        let a = g.gelu(a);
        let gated = g.mul(a, b)?;
        let (pw, pb) = self.gate_proj.bind(g);
        let body = g.conv1d(gated, pw, Some(pb), Padding::Same)?;

        let wide = g.reshape(body, &[batch, channels * width, len])?;
        let (fw, fb) = self.fuse.bind(g);
        let mixed = g.conv1d(wide, fw, Some(fb), Padding::Same)?;
        let mixed = g.reshape(mixed, &[n, width, len])?;

        let skip = match &self.residual {
            Some(proj) => {
                let (rw, rb) = proj.bind(g);
                g.conv1d(x, rw, Some(rb), Padding::Same)?
            }
            None => x,
        };
        g.add(mixed, skip)
    }
}

impl Params for RfamoeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("experts.{i}")), f);
        }
        self.router.visit(&join(prefix, "router"), f);
        f(&join(prefix, "norm.gamma"), &self.norm_gamma);
        f(&join(prefix, "norm.beta"), &self.norm_beta);
        self.gate_proj.visit(&join(prefix, "gate_proj"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
        if let Some(r) = &self.residual {
            r.visit(&join(prefix, "residual"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("experts.{i}")), f);
        }
        self.router.visit_mut(&join(prefix, "router"), f);
        f(&join(prefix, "norm.gamma"), &mut self.norm_gamma);
        f(&join(prefix, "norm.beta"), &mut self.norm_beta);
        self.gate_proj.visit_mut(&join(prefix, "gate_proj"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        if let Some(r) = &mut self.residual {
            r.visit_mut(&join(prefix, "residual"), f);
        }
    }
}

/// Runs the block on a tensor. `x` is [N, L_in, T]; `channels` is C.
pub fn rfamoe_forward(
    x: &Tensor,
    params: &RfamoeParams,
    channels: usize,
    mode: GateMode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let out = params.forward(&mut g, xi, channels, mode)?;
    Ok(g.value(out).clone())
}
