use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// Convex per-entry penalty, averaged over entries.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvexLoss {
    Mse,
    Mae,
    /// Piecewise-linear interpolation of `(residual, penalty)` knots, extended
    /// linearly past the ends.
    Custom(Vec<(f64, f64)>),
}

impl ConvexLoss {
    /// Custom loss from knots sorted by residual whose slopes never decrease.
    pub fn custom(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("convex_loss", "need at least two knots"));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("convex_loss", "knot positions must strictly increase"));
        }
        let slopes: Vec<f64> = knots.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
        if slopes.windows(2).any(|s| s[1] < s[0]) {
            return Err(Error::invalid("convex_loss", "knot slopes decrease, the table is not convex"));
        }
        Ok(ConvexLoss::Custom(knots))
    }

    fn segment(knots: &[(f64, f64)], r: f64) -> usize {
        let i = knots.partition_point(|k| k.0 <= r);
        i.clamp(1, knots.len() - 1) - 1
    }

    pub fn pointwise(&self, r: f64) -> f64 {
        match self {
            ConvexLoss::Mse => r * r,
            ConvexLoss::Mae => r.abs(),
            ConvexLoss::Custom(k) => {
                let i = Self::segment(k, r);
                let (x0, y0) = k[i];
                let (x1, y1) = k[i + 1];
                y0 + (y1 - y0) * (r - x0) / (x1 - x0)
            }
        }
    }

    /// A subgradient of the pointwise penalty.
    pub fn derivative(&self, r: f64) -> f64 {
        match self {
            ConvexLoss::Mse => 2.0 * r,
            ConvexLoss::Mae => r.signum() * (r != 0.0) as u8 as f64,
            ConvexLoss::Custom(k) => {
                let i = Self::segment(k, r);
                (k[i + 1].1 - k[i].1) / (k[i + 1].0 - k[i].0)
            }
        }
    }

    /// Mean penalty of `residual`.
    pub fn eval(&self, residual: &Tensor) -> f64 {
        residual.data().iter().map(|&r| self.pointwise(r)).sum::<f64>() / residual.numel() as f64
    }
}

impl fmt::Display for ConvexLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvexLoss::Mse => write!(f, "mse"),
            ConvexLoss::Mae => write!(f, "mae"),
            ConvexLoss::Custom(k) => {
                let parts: Vec<String> = k.iter().map(|(x, y)| format!("{x}:{y}")).collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for ConvexLoss {
    type Err = Error;

    /// `mse`, `mae`, or `custom:x0:y0,x1:y1,...`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ConvexLoss::Mse),
            "mae" => Ok(ConvexLoss::Mae),
            _ => {
                let table = s
                    .strip_prefix("custom:")
                    .ok_or_else(|| Error::invalid("convex_loss", format!("unknown loss {s:?}")))?;
                let knots = table
                    .split(',')
                    .map(|kv| {
                        let (x, y) = kv.split_once(':')?;
                        Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
                    })
                    .collect::<Option<Vec<(f64, f64)>>>()
                    .ok_or_else(|| Error::invalid("convex_loss", format!("malformed knot table {table:?}")))?;
                ConvexLoss::custom(knots)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        assert_eq!(ConvexLoss::Mse.pointwise(-3.0), 9.0);
        assert_eq!(ConvexLoss::Mae.pointwise(-3.0), 3.0);
        let huberish = ConvexLoss::custom(vec![(-1.0, 1.0), (0.0, 0.0), (1.0, 1.0), (2.0, 3.0)]).unwrap();
        assert_eq!(huberish.pointwise(0.5), 0.5);
        assert_eq!(huberish.pointwise(1.5), 2.0);
        assert_eq!(huberish.pointwise(3.0), 5.0);
        assert_eq!(huberish.pointwise(-2.0), 2.0);
        assert_eq!(huberish.derivative(1.5), 2.0);
    }

    #[test]
    fn rejects_non_convex_table() {
        assert!(ConvexLoss::custom(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]).is_err());
        assert!(ConvexLoss::custom(vec![(0.0, 0.0)]).is_err());
        assert!(ConvexLoss::custom(vec![(1.0, 0.0), (0.0, 1.0)]).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in ["mse", "mae", "custom:-1:1,0:0,2:4"] {
            let l: ConvexLoss = s.parse().unwrap();
            assert_eq!(l.to_string().parse::<ConvexLoss>().unwrap(), l);
        }
        assert!("huber".parse::<ConvexLoss>().is_err());
    }
}
