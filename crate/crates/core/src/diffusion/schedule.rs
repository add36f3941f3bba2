use crate::error::{Error, Result};

/// Diffusion coefficients for steps `1..=steps()`. Vectors are indexed by
/// `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Coefficients of the reverse update `x_{t-1} = a x_t + b eps_hat + sigma z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoefficients {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

/// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("make_schedule", "need at least one diffusion step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"),
        ));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Schedule from explicit betas, each in (0, 1) and nondecreasing.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule", "need at least one diffusion step"));
        }
        if let Some(i) = beta.iter().position(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("schedule", format!("beta at step {} is {}, outside (0, 1)", i + 1, beta[i])));
        }
        if let Some(i) = beta.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid("schedule", format!("beta decreases at step {}", i + 2)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize, op: &'static str) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(op, format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn coefficients(&self, t: usize) -> Result<ReverseCoefficients> {
        self.check_step(t, "coefficients")?;
        let (beta, alpha, alpha_bar) = (self.beta[t - 1], self.alpha[t - 1], self.alpha_bar[t - 1]);
        Ok(ReverseCoefficients {
            a: 1.0 / alpha.sqrt(),
            b: -beta / (alpha.sqrt() * (1.0 - alpha_bar).sqrt()),
            sigma: if t > 1 { beta.sqrt() } else { 0.0 },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forty_steps() {
        let s = make_schedule(40, 1e-4, 0.05).unwrap();
        assert_eq!(s.steps(), 40);
        assert_eq!(s.beta()[0], 1e-4);
        assert!((s.beta()[39] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5]);
    }

    #[test]
    fn three_step_products() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        for (got, want) in s.alpha_bar().iter().zip([0.9, 0.72, 0.504]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(5, 0.0, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 0.2).is_err());
        assert!(make_schedule(5, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn reverse_coefficients_closed_form() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let c = s.coefficients(2).unwrap();
        assert!((c.a - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
        assert!((c.b + 0.2 / (0.8f64.sqrt() * 0.28f64.sqrt())).abs() < 1e-15);
        assert!((c.sigma - 0.2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.coefficients(1).unwrap().sigma, 0.0);
        assert!(s.coefficients(0).is_err());
        assert!(s.coefficients(4).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_monotone(steps in 1usize..80, lo in 1e-5f64..0.5, span in 0.0f64..0.49) {
            let s = make_schedule(steps, lo, lo + span).unwrap();
            let ab = s.alpha_bar();
            let mut prod = 1.0;
            for t in 0..steps {
                prop_assert!(ab[t] > 0.0 && ab[t] < 1.0);
                if t > 0 {
                    prop_assert!(ab[t] < ab[t - 1]);
                }
                if span > 0.0 && t > 0 {
                    prop_assert!(s.beta()[t] > s.beta()[t - 1]);
                }
                prod *= 1.0 - s.beta()[t];
                prop_assert!((ab[t] - prod).abs() <= 1e-12);
            }
        }
    }
}
