//! Fusion MoE head: gate-weighted merge of K pointwise expert kernels into a
//! single per-sample kernel, followed by one dynamic convolution.

use crate::error::{Error, Result};
use crate::moe_blocks::params::{join, ConvParams, LinearParams, Params};
use crate::rng::Rng;
use crate::tensor_core::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionMoeParams {
    /// Expert `k`: weight [1, L, 1], bias [1].
    pub experts: Vec<ConvParams>,
    /// [K, L].
    pub router: LinearParams,
}

/// Source of the gate weights used to merge expert kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadGates {
    /// Softmax of the router applied to time-pooled features.
    Router,
    /// The same simplex weights [K] for every feature map.
    Fixed(Vec<f64>),
    /// Explicit gates, [N, K].
    PerMap(Tensor),
}

impl HeadGates {
    /// All weight on expert `k`.
    pub fn one_hot(k: usize, experts: usize) -> Self {
        let mut w = vec![0.0; experts];
        w[k] = 1.0;
        HeadGates::Fixed(w)
    }

    pub fn uniform(experts: usize) -> Self {
        HeadGates::Fixed(vec![1.0 / experts as f64; experts])
    }
}

impl FusionMoeParams {
    pub fn init(width: usize, experts: usize, rng: &mut Rng) -> Self {
        Self {
            experts: (0..experts).map(|_| ConvParams::init(1, width, 1, rng)).collect(),
            router: LinearParams::init(experts, width, rng),
        }
    }

    pub fn zeros(width: usize, experts: usize) -> Self {
        Self {
            experts: (0..experts).map(|_| ConvParams::zeros(1, width, 1)).collect(),
            router: LinearParams::zeros(experts, width),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn width(&self) -> usize {
        self.router.in_features()
    }

    /// Records the head on `g`. `x` is [N, L, T]; the result is [N, 1, T].
    pub fn forward(&self, g: &mut Graph, x: NodeId, gates: &HeadGates) -> Result<NodeId> {
        let xv = g.value(x);
        xv.expect_rank(3, "fusion_moe", "features [N, L, T]")?;
        let (n, l) = (xv.dim(0), xv.dim(1));
        let k = self.num_experts();
        if l != self.width() {
            return Err(Error::shape(
                "fusion_moe",
                format!("feature width (axis 1) is {l}, experts expect {}", self.width()),
            ));
        }
        let gate = match gates {
            HeadGates::Router => {
                let pooled = g.mean_over_time(x)?;
                let (rw, rb) = (g.param(&self.router.weight), g.param(&self.router.bias));
                let logits = g.linear(pooled, rw, Some(rb))?;
                g.softmax(logits)?
            }
            HeadGates::Fixed(w) => {
                if w.len() != k {
                    return Err(Error::shape("fusion_moe", format!("{} fixed gates for {k} experts", w.len())));
                }
                let data = (0..n).flat_map(|_| w.iter().copied()).collect();
                g.leaf(Tensor::from_vec(vec![n, k], data)?)
            }
            HeadGates::PerMap(t) => {
                if t.shape() != [n, k] {
                    return Err(Error::shape(
                        "fusion_moe",
                        format!("gates {:?} but expected [{n}, {k}]", t.shape()),
                    ));
                }
                g.leaf(t.clone())
            }
        };
        let weights: Vec<NodeId> = self.experts.iter().map(|e| g.param(&e.weight)).collect();
        let biases: Vec<NodeId> = self.experts.iter().map(|e| g.param(&e.bias)).collect();
        let weights = g.stack(&weights)?;
        let biases = g.stack(&biases)?;
        let merged_w = g.matmul(gate, weights)?;
        let merged_b = g.matmul(gate, biases)?;
        g.dynamic_pointwise(x, merged_w, merged_b)
    }

    /// Router gates for features `x` [N, L, T], as [N, K].
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let logits = crate::moe_blocks::router::router_logits(x, &self.router)?;
        crate::tensor_core::softmax(&logits)
    }
}

impl Params for FusionMoeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("experts.{i}")), f);
        }
        self.router.visit(&join(prefix, "router"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("experts.{i}")), f);
        }
        self.router.visit_mut(&join(prefix, "router"), f);
    }
}

/// Runs the head on `x` [N, L, T] with router gates, returning [N, 1, T].
pub fn fusion_moe_forward(x: &Tensor, params: &FusionMoeParams) -> Result<Tensor> {
    fusion_moe_forward_with(x, params, &HeadGates::Router)
}

pub fn fusion_moe_forward_with(x: &Tensor, params: &FusionMoeParams, gates: &HeadGates) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let out = params.forward(&mut g, xi, gates)?;
    Ok(g.value(out).clone())
}
