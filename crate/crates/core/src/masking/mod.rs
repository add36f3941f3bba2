//! Missing-data masks. A mask entry of 1 means observed, 0 means missing.

use std::fmt;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor_core::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum MaskKind {
    /// Each entry missing independently with probability `ratio`.
    Random { ratio: f64 },
    /// One run of `drop_length` missing steps in each of `drop_channels`
    /// channels per sample. With `shared_window` every chosen channel of a
    /// sample uses the same start.
    Continuous {
        drop_length: usize,
        drop_channels: usize,
        shared_window: bool,
    },
}

impl MaskKind {
    /// A mask of this kind drawn from `rng`.
    pub fn draw(&self, b: usize, c: usize, len: usize, rng: &mut Rng) -> Result<Tensor> {
        match *self {
            MaskKind::Random { ratio } => random_mask(b, c, len, ratio, rng),
            MaskKind::Continuous {
                drop_length,
                drop_channels,
                shared_window,
            } => continuous_mask_with(b, c, len, drop_length, drop_channels, shared_window, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub seed: u64,
}

impl MaskSpec {
    pub fn random(ratio: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::Random { ratio },
            seed,
        }
    }

    pub fn continuous(drop_length: usize, drop_channels: usize, seed: u64) -> Self {
        Self {
            kind: MaskKind::Continuous {
                drop_length,
                drop_channels,
                shared_window: false,
            },
            seed,
        }
    }

    /// A mask of shape [B, C, T]; the same spec always gives the same mask.
    pub fn generate(&self, b: usize, c: usize, len: usize) -> Result<Tensor> {
        self.kind.draw(b, c, len, &mut rng::seeded(self.seed))
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MaskKind::Random { ratio } => write!(f, "random(ratio={ratio}, seed={})", self.seed),
            MaskKind::Continuous {
                drop_length,
                drop_channels,
                shared_window,
            } => write!(
                f,
                "continuous(length={drop_length}, channels={drop_channels}, shared={shared_window}, seed={})",
                self.seed
            ),
        }
    }
}

pub fn random_mask(b: usize, c: usize, len: usize, ratio: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("random_mask", format!("ratio {ratio} outside [0, 1]")));
    }
    let data = (0..b * c * len)
        .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(vec![b, c, len], data)
}

pub fn continuous_mask(
    b: usize,
    c: usize,
    len: usize,
    drop_length: usize,
    drop_channels: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    continuous_mask_with(b, c, len, drop_length, drop_channels, false, rng)
}

pub fn continuous_mask_with(
    b: usize,
    c: usize,
    len: usize,
    drop_length: usize,
    drop_channels: usize,
    shared_window: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    if drop_length == 0 || drop_length > len {
        return Err(Error::invalid(
            "continuous_mask",
            format!("drop length {drop_length} must be in 1..={len}"),
        ));
    }
    if drop_channels == 0 || drop_channels > c {
        return Err(Error::invalid(
            "continuous_mask",
            format!("drop channel count {drop_channels} must be in 1..={c}"),
        ));
    }
    let mut mask = Tensor::ones(&[b, c, len]);
    for n in 0..b {
        let chosen = index::sample(rng, c, drop_channels);
        let shared = rng.gen_range(0..=len - drop_length);
        let row = mask.row_mut(n);
        for ch in chosen.iter() {
            let start = if shared_window {
                shared
            } else {
                rng.gen_range(0..=len - drop_length)
            };
            let base = ch * len + start;
            row[base..base + drop_length].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(mask)
}

pub fn is_binary(mask: &Tensor) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

pub(crate) fn check_binary(mask: &Tensor, op: &'static str) -> Result<()> {
    match mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::invalid(
            op,
            format!("mask entry {i} is {}, masks must be 0 or 1", mask.data()[i]),
        )),
        None => Ok(()),
    }
}

/// Condition signal: `x` with missing entries zeroed.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    x.expect_same_shape(mask, "apply_mask")?;
    check_binary(mask, "apply_mask")?;
    x.mul(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_runs(channel: &[f64]) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < channel.len() {
            if channel[i] == 0.0 {
                let start = i;
                while i < channel.len() && channel[i] == 0.0 {
                    i += 1;
                }
                runs.push((start, i - start));
            } else {
                i += 1;
            }
        }
        runs
    }

    #[test]
    fn random_mask_extremes() {
        let mut r = rng::seeded(1);
        assert!(random_mask(2, 3, 10, 0.0, &mut r).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(random_mask(2, 3, 10, 1.0, &mut r).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(random_mask(1, 1, 1, 1.5, &mut r).is_err());
        assert!(random_mask(1, 1, 1, -0.1, &mut r).is_err());
    }

    #[test]
    fn random_mask_rate() {
        let m = random_mask(10, 10, 1000, 0.3, &mut rng::seeded(2)).unwrap();
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((0.29..=0.31).contains(&zeros), "{zeros}");
    }

    #[test]
    fn single_channel_run_of_300() {
        let m = continuous_mask(1, 12, 1000, 300, 1, &mut rng::seeded(3)).unwrap();
        let runs: Vec<_> = (0..12).map(|c| zero_runs(&m.data()[c * 1000..(c + 1) * 1000])).collect();
        assert_eq!(runs.iter().filter(|r| !r.is_empty()).count(), 1);
        let run = runs.iter().find(|r| !r.is_empty()).unwrap();
        assert_eq!(run.len(), 1);
        assert_eq!(run[0].1, 300);
    }

    #[test]
    fn full_length_and_full_coverage() {
        let m = continuous_mask(2, 4, 50, 50, 2, &mut rng::seeded(4)).unwrap();
        for n in 0..2 {
            let full = (0..4).filter(|c| m.row(n)[c * 50..(c + 1) * 50].iter().all(|&v| v == 0.0)).count();
            assert_eq!(full, 2);
        }
        let m = continuous_mask(2, 4, 50, 7, 4, &mut rng::seeded(5)).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                assert_eq!(zero_runs(&m.row(n)[c * 50..(c + 1) * 50]).iter().map(|r| r.1).collect::<Vec<_>>(), [7]);
            }
        }
    }

    #[test]
    fn continuous_mask_rejects_bad_bounds() {
        let mut r = rng::seeded(6);
        assert!(continuous_mask(1, 3, 10, 11, 1, &mut r).is_err());
        assert!(continuous_mask(1, 3, 10, 2, 4, &mut r).is_err());
        assert!(continuous_mask(1, 3, 10, 0, 1, &mut r).is_err());
    }

    #[test]
    fn shared_window_aligns_runs() {
        let m = continuous_mask_with(3, 5, 40, 6, 3, true, &mut rng::seeded(7)).unwrap();
        for n in 0..3 {
            let starts: Vec<usize> = (0..5)
                .filter_map(|c| zero_runs(&m.row(n)[c * 40..(c + 1) * 40]).first().map(|r| r.0))
                .collect();
            assert_eq!(starts.len(), 3);
            assert!(starts.iter().all(|&s| s == starts[0]));
        }
    }

    #[test]
    fn apply_mask_examples() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert_eq!(apply_mask(&x, &Tensor::ones(&[3])).unwrap(), x);
        assert_eq!(apply_mask(&x, &Tensor::zeros(&[3])).unwrap(), Tensor::zeros(&[3]));
        assert_eq!(apply_mask(&x, &Tensor::vector(&[1.0, 0.0, 1.0])).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert!(apply_mask(&x, &Tensor::vector(&[1.0, 0.5, 1.0])).is_err());
    }

    proptest! {
        #[test]
        fn continuous_runs_are_exact(
            c in 1usize..6, len in 1usize..60, seed in any::<u64>(), lfrac in 0.0f64..1.0, cfrac in 0.0f64..1.0,
            shared in any::<bool>(),
        ) {
            let drop_length = 1 + ((len - 1) as f64 * lfrac) as usize;
            let drop_channels = 1 + ((c - 1) as f64 * cfrac) as usize;
            let m = continuous_mask_with(2, c, len, drop_length, drop_channels, shared, &mut rng::seeded(seed)).unwrap();
            for n in 0..2 {
                let mut hit = 0;
                for ch in 0..c {
                    let runs = zero_runs(&m.row(n)[ch * len..(ch + 1) * len]);
                    if !runs.is_empty() {
                        prop_assert_eq!(runs.len(), 1);
                        prop_assert_eq!(runs[0].1, drop_length);
                        hit += 1;
                    }
                }
                prop_assert_eq!(hit, drop_channels);
            }
        }

        #[test]
        fn masks_reproduce_from_seed(seed in any::<u64>(), ratio in 0.0f64..1.0) {
            let a = MaskSpec::random(ratio, seed).generate(2, 3, 20).unwrap();
            let b = MaskSpec::random(ratio, seed).generate(2, 3, 20).unwrap();
            prop_assert_eq!(a, b);
            let a = MaskSpec::continuous(5, 2, seed).generate(2, 3, 20).unwrap();
            let b = MaskSpec::continuous(5, 2, seed).generate(2, 3, 20).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn apply_mask_is_idempotent(seed in any::<u64>(), ratio in 0.0f64..1.0) {
            let mut r = rng::seeded(seed);
            let x = rng::standard_normal(&[2, 3, 10], &mut r);
            let m = random_mask(2, 3, 10, ratio, &mut r).unwrap();
            let once = apply_mask(&x, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }
    }
}
