//! FiLM-style bridge: a step-conditioned per-channel affine map applied to
//! condition features before they join the main path.

use crate::error::{Error, Result};
use crate::moe_blocks::embedding::step_embeddings;
use crate::moe_blocks::params::{join, LinearParams, Params};
use crate::rng::Rng;
use crate::tensor_core::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeParams {
    /// Step embedding [D] -> (gamma [L], beta [L]), weight [2L, D].
    pub film: LinearParams,
}

impl BridgeParams {
    /// Random weights with the bias set so that gamma starts near 1 and beta near 0.
    pub fn init(width: usize, d_emb: usize, rng: &mut Rng) -> Self {
        let mut film = LinearParams::init(2 * width, d_emb, rng);
        film.weight = film.weight.scale(0.1);
        film.bias.data_mut()[..width].iter_mut().for_each(|b| *b = 1.0);
        Self { film }
    }

    pub fn zeros(width: usize, d_emb: usize) -> Self {
        Self {
            film: LinearParams::zeros(2 * width, d_emb),
        }
    }

    pub fn width(&self) -> usize {
        self.film.out_features() / 2
    }

    pub fn d_emb(&self) -> usize {
        self.film.in_features()
    }

    /// (gamma, beta) for step `t`, each of length L.
    pub fn modulation(&self, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let emb = step_embeddings(&[t], self.d_emb())?;
        let gb = crate::tensor_core::linear(&emb, &self.film.weight, Some(&self.film.bias))?;
        let l = self.width();
        Ok((gb.data()[..l].to_vec(), gb.data()[l..].to_vec()))
    }

    /// Records the bridge on `g`. `h` is [N, L, T]; `steps[j]` is the step
    /// for rows `j*group..(j+1)*group`.
    pub fn forward(&self, g: &mut Graph, h: NodeId, steps: &[usize], group: usize) -> Result<NodeId> {
        let hv = g.value(h);
        hv.expect_rank(3, "bridge", "features [N, L, T]")?;
        if hv.dim(1) != self.width() {
            return Err(Error::shape(
                "bridge",
                format!("feature width (axis 1) is {} but FiLM emits {} channels", hv.dim(1), self.width()),
            ));
        }
        let emb = g.leaf(step_embeddings(steps, self.d_emb())?);
        let (w, b) = (g.param(&self.film.weight), g.param(&self.film.bias));
        let coeffs = g.linear(emb, w, Some(b))?;
        g.group_affine(h, coeffs, group)
    }
}

impl Params for BridgeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.film.visit(&join(prefix, "film"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.film.visit_mut(&join(prefix, "film"), f);
    }
}

/// Applies the bridge at step `t` to every row of `h` [N, L, T].
pub fn bridge_forward(h: &Tensor, t: usize, params: &BridgeParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let hi = g.leaf(h.clone());
    let out = params.forward(&mut g, hi, &[t], h.dim(0))?;
    Ok(g.value(out).clone())
}
