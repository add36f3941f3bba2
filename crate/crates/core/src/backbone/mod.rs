//! Full noise estimator: two parallel RFAMoE stacks over the noisy signal and
//! the masked condition, a bridge per level carrying condition features into
//! the main path, and a Fusion MoE head.
//!
//! Every signal channel becomes its own feature map, so a batch [B, C, T]
//! is processed as N = B * C maps of shape [L, T].

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::moe_blocks::{
    BridgeParams, ConvParams, FusionMoeParams, GateMode, HeadGates, Params, RfamoeParams,
};
use crate::rng::Rng;
use crate::tensor_core::{Graph, NodeId, Padding, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Signal channels C, needed by the cross-channel fusion convolutions.
    pub channels: usize,
    /// Feature width L.
    pub width: usize,
    pub depth: usize,
    /// Kernel size of each RFAMoE expert.
    pub kernels: Vec<usize>,
    /// Fusion MoE head experts K.
    pub head_experts: usize,
    pub d_emb: usize,
    pub gate_mode: GateMode,
}

impl BackboneConfig {
    pub fn toy(channels: usize) -> Self {
        Self {
            channels,
            width: 16,
            depth: 1,
            kernels: vec![3, 5, 7, 9, 11],
            head_experts: 4,
            d_emb: 64,
            gate_mode: GateMode::Renormalized,
        }
    }

    pub fn full(channels: usize) -> Self {
        Self {
            channels,
            width: 160,
            depth: 3,
            kernels: (1..=15).map(|i| 2 * i + 1).collect(),
            head_experts: 16,
            d_emb: 64,
            gate_mode: GateMode::Renormalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("backbone", detail));
        if self.channels == 0 {
            return bad("channel count must be at least 1".into());
        }
        if self.width == 0 || self.width % 2 != 0 {
            return bad(format!("width L must be positive and even, got {}", self.width));
        }
        if self.head_experts == 0 {
            return bad("head needs at least one expert".into());
        }
        if self.d_emb == 0 || self.d_emb % 2 != 0 {
            return bad(format!("d_emb must be positive and even, got {}", self.d_emb));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub main: RfamoeParams,
    pub cond: RfamoeParams,
    pub bridge: BridgeParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    /// Pointwise 1 -> L lift of the noisy signal: weight [L, 1, 1].
    pub lift_xt: ConvParams,
    /// Pointwise 1 -> L lift of the condition.
    pub lift_cond: ConvParams,
    pub levels: Vec<Level>,
    pub head: FusionMoeParams,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, l) = (config.channels, config.width);
        let lift_xt = ConvParams::init(l, 1, 1, rng);
        let lift_cond = ConvParams::init(l, 1, 1, rng);
        let mut levels = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            levels.push(Level {
                main: RfamoeParams::init(l, l, &config.kernels, c, rng)?,
                cond: RfamoeParams::init(l, l, &config.kernels, c, rng)?,
                bridge: BridgeParams::init(l, config.d_emb, rng),
            });
        }
        let head = FusionMoeParams::init(l, config.head_experts, rng);
        Ok(Self {
            config: config.clone(),
            lift_xt,
            lift_cond,
            levels,
            head,
        })
    }

    /// Every tensor zero, instance-norm gammas included.
    pub fn zeros(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (c, l) = (config.channels, config.width);
        let mut levels = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            levels.push(Level {
                main: RfamoeParams::zeros(l, l, &config.kernels, c)?,
                cond: RfamoeParams::zeros(l, l, &config.kernels, c)?,
                bridge: BridgeParams::zeros(l, config.d_emb),
            });
        }
        Ok(Self {
            config: config.clone(),
            lift_xt: ConvParams::zeros(l, 1, 1),
            lift_cond: ConvParams::zeros(l, 1, 1),
            levels,
            head: FusionMoeParams::zeros(l, config.head_experts),
        })
    }

    /// Records the estimator on `g`. `x_t` and `x_bar` are [B, C, T] nodes;
    /// `steps[b]` is the diffusion step of batch row `b`. Returns [B, C, T].
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: NodeId,
        x_bar: NodeId,
        steps: &[usize],
        gates: &HeadGates,
    ) -> Result<NodeId> {
        let shape = g.value(x_t).shape().to_vec();
        if shape.len() != 3 || g.value(x_bar).shape() != shape.as_slice() {
            return Err(Error::shape(
                "noise_estimate",
                format!(
                    "x_t {:?} and x_bar {:?} must both be [B, C, T]",
                    shape,
                    g.value(x_bar).shape()
                ),
            ));
        }
        let (b, c, len) = (shape[0], shape[1], shape[2]);
        if c != self.config.channels {
            return Err(Error::shape(
                "noise_estimate",
                format!("signal has {c} channels (axis 1), model was built for {}", self.config.channels),
            ));
        }
        if steps.len() != b {
            return Err(Error::shape(
                "noise_estimate",
                format!("{} diffusion steps for a batch of {b}", steps.len()),
            ));
        }
        if let Some(&s) = steps.iter().find(|&&s| s == 0) {
            return Err(Error::invalid("noise_estimate", format!("diffusion step {s} out of range, steps start at 1")));
        }
        let maps = [b * c, 1, len];
        let xt = g.reshape(x_t, &maps)?;
        let xc = g.reshape(x_bar, &maps)?;
        let (w, bias) = (g.param(&self.lift_xt.weight), g.param(&self.lift_xt.bias));
        let mut h = g.conv1d(xt, w, Some(bias), Padding::Same)?;
        let (w, bias) = (g.param(&self.lift_cond.weight), g.param(&self.lift_cond.bias));
        let mut hc = g.conv1d(xc, w, Some(bias), Padding::Same)?;
        let mode = self.config.gate_mode;
        for level in &self.levels {
            hc = level.cond.forward(g, hc, c, mode)?;
            let main = level.main.forward(g, h, c, mode)?;
            let bridged = level.bridge.forward(g, hc, steps, c)?;
            h = g.add(main, bridged)?;
        }
        let out = self.head.forward(g, h, gates)?;
        g.reshape(out, &shape)
    }

    /// Mean squared error between the estimate and `eps`, with the gradient
    /// of every parameter.
    pub fn loss_and_grads(
        &self,
        x_t: &Tensor,
        x_bar: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut g = Graph::new();
        let loss = self.loss_node(&mut g, x_t, x_bar, steps, eps)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], self.gradients(&g, &grads)))
    }

    pub(crate) fn loss_node(
        &self,
        g: &mut Graph,
        x_t: &Tensor,
        x_bar: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<NodeId> {
        let xt = g.leaf(x_t.clone());
        let xb = g.leaf(x_bar.clone());
        let est = self.forward(g, xt, xb, steps, &HeadGates::Router)?;
        g.mse(est, eps)
    }
}

impl Params for BackboneParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        use crate::moe_blocks::join;
        self.lift_xt.visit(&join(prefix, "lift_xt"), f);
        self.lift_cond.visit(&join(prefix, "lift_cond"), f);
        for (i, level) in self.levels.iter().enumerate() {
            let p = join(prefix, &format!("levels.{i}"));
            level.main.visit(&join(&p, "main"), f);
            level.cond.visit(&join(&p, "cond"), f);
            level.bridge.visit(&join(&p, "bridge"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        use crate::moe_blocks::join;
        self.lift_xt.visit_mut(&join(prefix, "lift_xt"), f);
        self.lift_cond.visit_mut(&join(prefix, "lift_cond"), f);
        for (i, level) in self.levels.iter_mut().enumerate() {
            let p = join(prefix, &format!("levels.{i}"));
            level.main.visit_mut(&join(&p, "main"), f);
            level.cond.visit_mut(&join(&p, "cond"), f);
            level.bridge.visit_mut(&join(&p, "bridge"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Noise estimate for one diffusion step `t` shared by the whole batch.
pub fn noise_estimate(x_t: &Tensor, x_bar: &Tensor, t: usize, params: &BackboneParams) -> Result<Tensor> {
    noise_estimate_with(x_t, x_bar, t, params, &HeadGates::Router)
}

/// As [`noise_estimate`] with explicit head gates.
pub fn noise_estimate_with(
    x_t: &Tensor,
    x_bar: &Tensor,
    t: usize,
    params: &BackboneParams,
    gates: &HeadGates,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xt = g.leaf(x_t.clone());
    let xb = g.leaf(x_bar.clone());
    let b = if x_t.rank() > 0 { x_t.dim(0) } else { 0 };
    let out = params.forward(&mut g, xt, xb, &vec![t; b], gates)?;
    Ok(g.value(out).clone())
}

pub fn param_count(params: &BackboneParams) -> usize {
    params.param_count()
}

#[cfg(test)]
mod tests;
