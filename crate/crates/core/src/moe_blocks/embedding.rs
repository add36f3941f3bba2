use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// Sinusoidal encoding of a diffusion step:
/// `[sin(t / 10000^(2i/D)), cos(t / 10000^(2i/D))]` for `i = 0..D/2`, interleaved.
pub fn step_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(
            "step_embedding",
            format!("embedding size must be positive and even, got {dim}"),
        ));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(Tensor::vector(&out))
}

/// Embeddings for several steps stacked as [len(steps), dim].
pub fn step_embeddings(steps: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        data.extend(step_embedding(t, dim)?.into_data());
    }
    Tensor::from_vec(vec![steps.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_is_sin_zero_cos_one() {
        let e = step_embedding(0, 8).unwrap();
        for pair in e.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn closed_form_for_dim_four() {
        let e = step_embedding(1, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn distinct_steps_distinct_embeddings() {
        let all: Vec<Tensor> = (1..=40).map(|t| step_embedding(t, 16).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].max_abs_diff(&all[j]).unwrap() > 1e-6);
            }
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(step_embedding(3, 5).is_err());
    }
}
