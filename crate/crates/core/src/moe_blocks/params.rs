use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor_core::{finite_diff_check, Gradients, Graph, NodeId, Tensor};

/// Named walk over every trainable tensor, in a fixed canonical order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name.to_string()));
        out
    }

    fn get(&self, name: &str) -> Option<Tensor> {
        let mut out = None;
        self.visit("", &mut |n, t| {
            if n == name {
                out = Some(t.clone());
            }
        });
        out
    }

    /// Gradient of every parameter after a backward sweep over `g`; zero
    /// for parameters the loss never touched.
    fn gradients(&self, g: &Graph, grads: &Gradients) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| {
            let grad = match g.param_node(t) {
                Some(id) => grads.wrt(id),
                None => Tensor::zeros(t.shape()),
            };
            out.push((name.to_string(), grad));
        });
        out
    }
}

/// Finite-difference check of the scalar built by `loss` with respect to the
/// parameter tensor called `name`.
pub fn param_gradcheck<P, F>(params: &P, name: &str, h: f64, loss: F) -> Result<f64>
where
    P: Params + Clone,
    F: Fn(&mut Graph, &P) -> Result<NodeId>,
{
    let point = params
        .get(name)
        .ok_or_else(|| Error::invalid("param_gradcheck", format!("no parameter named {name}")))?;
    finite_diff_check(
        |g, x| {
            let mut p = params.clone();
            let value = g.value(x).clone();
            p.visit_mut("", &mut |n, t| {
                if n == name {
                    *t = value.clone();
                }
            });
            p.visit("", &mut |n, t| {
                if n == name {
                    g.bind_param(t, x);
                }
            });
            loss(g, &p)
        },
        &point,
        h,
    )
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weights and bias of a 1-D convolution: weight [Cout, Cin, S], bias [Cout].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn zeros(cout: usize, cin: usize, size: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, size]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Uniform in +-1/sqrt(fan_in), zero bias.
    pub fn init(cout: usize, cin: usize, size: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / ((cin * size) as f64).sqrt();
        Self {
            weight: rng::uniform(&[cout, cin, size], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(2)
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> (NodeId, NodeId) {
        (g.param(&self.weight), g.param(&self.bias))
    }
}

impl Params for ConvParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Affine map weight [O, I], bias [O].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn init(out: usize, inp: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: rng::uniform(&[out, inp], -bound, bound, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }
}

impl Params for LinearParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// How the selected expert's output is scaled after top-1 routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Gate renormalized over the selected set, i.e. exactly 1.
    #[default]
    Renormalized,
    /// Raw softmax probability of the selected expert (router receives gradient).
    RawProbability,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Renormalized => "renormalized",
            GateMode::RawProbability => "raw",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renormalized" => Ok(GateMode::Renormalized),
            "raw" => Ok(GateMode::RawProbability),
            other => Err(Error::invalid(
                "gate mode",
                format!("expected 'renormalized' or 'raw', got '{other}'"),
            )),
        }
    }
}
