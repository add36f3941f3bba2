//! Reconstruction metrics: PRD (percent), SSD and MAD.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masking::check_binary;
use crate::tensor_core::Tensor;

/// Normalization of the PRD denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PrdConvention {
    /// Sum of squares of the reference.
    #[default]
    Raw,
    /// Sum of squares of the mean-removed reference.
    Centered,
}

fn check(x: &Tensor, x_hat: &Tensor, op: &'static str) -> Result<()> {
    x.expect_same_shape(x_hat, op)
}

fn ssd_slice(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn mad_slice(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn prd_slice(x: &[f64], x_hat: &[f64], convention: PrdConvention, context: &str) -> Result<f64> {
    let energy = match convention {
        PrdConvention::Raw => x.iter().map(|v| v * v).sum::<f64>(),
        PrdConvention::Centered => {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - m) * (v - m)).sum()
        }
    };
    if energy == 0.0 {
        return Err(Error::ZeroReference {
            context: context.to_string(),
        });
    }
    Ok(100.0 * (ssd_slice(x, x_hat) / energy).sqrt())
}

/// Sum of squared differences.
pub fn ssd(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check(x, x_hat, "ssd")?;
    Ok(ssd_slice(x.data(), x_hat.data()))
}

/// Maximum absolute difference.
pub fn mad(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check(x, x_hat, "mad")?;
    Ok(mad_slice(x.data(), x_hat.data()))
}

/// `100 * sqrt(ssd / sum x^2)`.
pub fn prd(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    prd_with(x, x_hat, PrdConvention::Raw)
}

pub fn prd_with(x: &Tensor, x_hat: &Tensor, convention: PrdConvention) -> Result<f64> {
    check(x, x_hat, "prd")?;
    prd_slice(x.data(), x_hat.data(), convention, "")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub prd: f64,
    pub ssd: f64,
    pub mad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: SampleMetrics,
}

impl MetricsReport {
    /// Header `index,prd,ssd,mad`, one row per sample, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,prd,ssd,mad\n");
        for (i, m) in self.per_sample.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", m.prd, m.ssd, m.mad).unwrap();
        }
        let a = &self.aggregate;
        writeln!(out, "mean,{},{},{}", a.prd, a.ssd, a.mad).unwrap();
        out
    }
}

/// Per-sample metrics over all channels of each sample, averaged across the
/// batch. With `region`, only entries where the region mask is 0 count.
pub fn evaluate(truth: &Tensor, pred: &Tensor, region: Option<&Tensor>) -> Result<MetricsReport> {
    evaluate_with(truth, pred, region, PrdConvention::Raw)
}

pub fn evaluate_with(
    truth: &Tensor,
    pred: &Tensor,
    region: Option<&Tensor>,
    convention: PrdConvention,
) -> Result<MetricsReport> {
    check(truth, pred, "evaluate")?;
    truth.expect_rank(3, "evaluate", "signals [B, C, T]")?;
    if let Some(m) = region {
        check(truth, m, "evaluate")?;
        check_binary(m, "evaluate")?;
    }
    let per_sample = (0..truth.dim(0))
        .into_par_iter()
        .map(|n| {
            let (x, y) = match region {
                None => (truth.row(n).to_vec(), pred.row(n).to_vec()),
                Some(m) => {
                    let keep: Vec<usize> = (0..m.row(n).len()).filter(|&i| m.row(n)[i] == 0.0).collect();
                    if keep.is_empty() {
                        return Err(Error::EmptyRegion(format!("sample {n} has no missing entries")));
                    }
                    (
                        keep.iter().map(|&i| truth.row(n)[i]).collect(),
                        keep.iter().map(|&i| pred.row(n)[i]).collect(),
                    )
                }
            };
            Ok(SampleMetrics {
                prd: prd_slice(&x, &y, convention, &format!(" (sample {n})"))?,
                ssd: ssd_slice(&x, &y),
                mad: mad_slice(&x, &y),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if per_sample.is_empty() {
        return Err(Error::EmptyRegion("batch has no samples".into()));
    }
    let k = per_sample.len() as f64;
    let aggregate = SampleMetrics {
        prd: per_sample.iter().map(|m| m.prd).sum::<f64>() / k,
        ssd: per_sample.iter().map(|m| m.ssd).sum::<f64>() / k,
        mad: per_sample.iter().map(|m| m.mad).sum::<f64>() / k,
    };
    Ok(MetricsReport { per_sample, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x)
    }

    #[test]
    fn ssd_examples() {
        assert_eq!(ssd(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(ssd(&v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap(), 5.0);
        assert!(ssd(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn metrics_match_naive_loops() {
        let mut r = rng::seeded(1);
        let x = rng::standard_normal(&[1000], &mut r);
        let y = rng::standard_normal(&[1000], &mut r);
        let mut s = 0.0;
        let mut m = 0.0f64;
        for i in 0..1000 {
            let d = x.data()[i] - y.data()[i];
            s += d * d;
            if d.abs() > m {
                m = d.abs();
            }
        }
        assert!((ssd(&x, &y).unwrap() - s).abs() < 1e-9);
        assert_eq!(mad(&x, &y).unwrap(), m);
    }

    #[test]
    fn prd_examples() {
        let x = v(&[3.0, 4.0]);
        assert_eq!(prd(&x, &x).unwrap(), 0.0);
        assert_eq!(prd(&x, &v(&[0.0, 0.0])).unwrap(), 100.0);
        assert!((prd(&x, &v(&[3.0, 0.0])).unwrap() - 80.0).abs() < 1e-9);
        let err = prd(&v(&[0.0, 0.0]), &x).unwrap_err();
        assert!(matches!(err, Error::ZeroReference { .. }));
    }

    #[test]
    fn centered_prd() {
        let x = v(&[1.0, 3.0]);
        // Centered energy is 2, raw energy is 10.
        let y = v(&[1.0, 2.0]);
        assert!((prd_with(&x, &y, PrdConvention::Centered).unwrap() - 100.0 * 0.5f64.sqrt()).abs() < 1e-12);
        assert!((prd(&x, &y).unwrap() - 100.0 * 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&v(&[1.0, 5.0]), &v(&[1.0, 5.0])).unwrap(), 0.0);
        assert_eq!(mad(&v(&[1.0, 5.0]), &v(&[2.0, 2.0])).unwrap(), 3.0);
    }

    #[test]
    fn evaluate_identity_and_single_sample() {
        let mut r = rng::seeded(2);
        let x = rng::standard_normal(&[3, 2, 5], &mut r);
        let rep = evaluate(&x, &x, None).unwrap();
        assert!(rep.per_sample.iter().all(|m| m.prd == 0.0 && m.ssd == 0.0 && m.mad == 0.0));
        let one = rng::standard_normal(&[1, 2, 5], &mut r);
        let y = rng::standard_normal(&[1, 2, 5], &mut r);
        let rep = evaluate(&one, &y, None).unwrap();
        assert_eq!(rep.aggregate, rep.per_sample[0]);
    }

    #[test]
    fn evaluate_hand_built_batch() {
        // Sample 0: x=[3,4], err 4 in one entry. Sample 1: x=[1,0], perfect.
        // Sample 2: x=[0,2], err 1 in both entries.
        let x = Tensor::from_vec(vec![3, 1, 2], vec![3.0, 4.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let y = Tensor::from_vec(vec![3, 1, 2], vec![3.0, 0.0, 1.0, 0.0, 1.0, 3.0]).unwrap();
        let rep = evaluate(&x, &y, None).unwrap();
        let prd2 = 100.0 * (2.0f64 / 4.0).sqrt();
        assert!((rep.aggregate.prd - (80.0 + 0.0 + prd2) / 3.0).abs() < 1e-12);
        assert!((rep.aggregate.ssd - (16.0 + 0.0 + 2.0) / 3.0).abs() < 1e-12);
        assert!((rep.aggregate.mad - (4.0 + 0.0 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_region() {
        let x = Tensor::from_vec(vec![1, 1, 4], vec![3.0, 100.0, 4.0, -7.0]).unwrap();
        let y = Tensor::from_vec(vec![1, 1, 4], vec![3.0, 0.0, 0.0, 9.0]).unwrap();
        let region = Tensor::from_vec(vec![1, 1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let rep = evaluate(&x, &y, Some(&region)).unwrap();
        assert!((rep.aggregate.prd - 80.0).abs() < 1e-9);
        assert_eq!(rep.aggregate.ssd, 16.0);
        let err = evaluate(&x, &y, Some(&Tensor::ones(&[1, 1, 4]))).unwrap_err();
        assert!(matches!(err, Error::EmptyRegion(_)));
    }

    #[test]
    fn csv_layout() {
        let x = Tensor::from_vec(vec![2, 1, 2], vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        let y = Tensor::from_vec(vec![2, 1, 2], vec![3.0, 0.0, 1.0, 1.0]).unwrap();
        let csv = evaluate(&x, &y, None).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["index,prd,ssd,mad", "0,80,16,4", "1,0,0,0", "mean,40,8,2"]);
    }

    proptest! {
        #[test]
        fn prd_scales_with_error(seed in any::<u64>(), c in 0.01f64..10.0) {
            let mut r = rng::seeded(seed);
            let x = rng::standard_normal(&[50], &mut r);
            let e = rng::standard_normal(&[50], &mut r);
            let one = prd(&x, &x.add(&e.scale(c)).unwrap()).unwrap();
            let two = prd(&x, &x.add(&e.scale(2.0 * c)).unwrap()).unwrap();
            prop_assert!((two - 2.0 * one).abs() <= 1e-10);
        }

        #[test]
        fn cross_metric_consistency(seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let x = rng::standard_normal(&[64], &mut r);
            let y = rng::standard_normal(&[64], &mut r);
            let s = ssd(&x, &y).unwrap();
            let p = prd(&x, &y).unwrap();
            let energy: f64 = x.data().iter().map(|v| v * v).sum();
            prop_assert!((s - (p / 100.0).powi(2) * energy).abs() <= 1e-9);
            prop_assert!(mad(&x, &y).unwrap() <= s.sqrt());
        }
    }
}
