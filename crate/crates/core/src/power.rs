//! Sample-size formula and the Wald test.

use serde::{Deserialize, Serialize};

use crate::special::{normal_cdf, normal_quantile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    SingleRegime,
    SharedPair,
    DistinctPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub kind: TestKind,
    pub alpha: f64,
    pub beta: f64,
}

impl TestSpec {
    pub fn new(kind: TestKind, alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok(Self { kind, alpha, beta })
    }

    /// Two-sided critical value `z_{α/2} = Φ⁻¹(1 − α/2)`.
    pub fn z_alpha(&self) -> f64 {
        normal_quantile(1.0 - self.alpha / 2.0).expect("alpha validated")
    }
}

/// `N = ⌈2(z_{α/2} − z_{1−β})²σ²/δ²⌉`, at least 1. `σ²` is half the `N·Var`
/// of the contrast, so `Var(δ̂) = 2σ²/N`.
pub fn required_n(delta: f64, sigma2: f64, alpha: f64, beta: f64) -> Result<u64> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "effect size must be finite and nonzero, got {delta}"
        )));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma^2 must be positive, got {sigma2}"
        )));
    }
    let spec = TestSpec::new(TestKind::SingleRegime, alpha, beta)?;
    let z_b = normal_quantile(beta)?;
    let n = 2.0 * (spec.z_alpha() - z_b).powi(2) * sigma2 / (delta * delta);
    Ok(n.ceil().max(1.0) as u64)
}

/// Same formula in terms of the standardized effect `δ* = δ/σ`.
pub fn required_n_standardized(delta_std: f64, alpha: f64, beta: f64) -> Result<u64> {
    required_n(delta_std, 1.0, alpha, beta)
}

/// `Φ(|δ|·√(N/(2σ²)) − z_{α/2})`; the opposite rejection tail is ignored.
pub fn analytic_power(delta: f64, sigma2: f64, n: u64, alpha: f64) -> Result<f64> {
    let spec = TestSpec::new(TestKind::SingleRegime, alpha, 0.5)?;
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma^2 must be positive, got {sigma2}"
        )));
    }
    Ok(normal_cdf(
        delta.abs() * (n as f64 / (2.0 * sigma2)).sqrt() - spec.z_alpha(),
    ))
}

/// `Z = δ̂ / √(2σ²/N)`.
pub fn wald_z(delta_hat: f64, sigma2: f64, n: u64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma^2 must be positive, got {sigma2}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    Ok(delta_hat / (2.0 * sigma2 / n as f64).sqrt())
}

pub fn reject(z: f64, alpha: f64) -> Result<bool> {
    let spec = TestSpec::new(TestKind::SingleRegime, alpha, 0.5)?;
    Ok(z.abs() > spec.z_alpha())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn worked_sizes() {
        assert_eq!(required_n_standardized(0.45, 0.05, 0.2).unwrap(), 78);
        assert_eq!(required_n_standardized(0.36, 0.05, 0.2).unwrap(), 122);
        assert_eq!(required_n(1.0, 1e-9, 0.05, 0.2).unwrap(), 1);
        assert!(required_n(0.0, 1.0, 0.05, 0.2).is_err());
        assert!(required_n(1.0, 1.0, 0.0, 0.2).is_err());
    }

    #[test]
    fn wald_basics() {
        assert_eq!(wald_z(0.0, 1.0, 50).unwrap(), 0.0);
        assert!(!reject(0.0, 0.05).unwrap());
        assert!(reject(1.959965, 0.05).unwrap());
        assert!(!reject(1.959963, 0.05).unwrap());
        assert!(wald_z(1.0, 0.0, 10).is_err());
    }

    #[test]
    fn null_rejection_rate_is_alpha() {
        let mut r = rng::from_seed(17);
        let reps = 5000;
        let sigma2 = 1.7;
        let n = 60u64;
        let sd = (2.0 * sigma2 / n as f64).sqrt();
        let hits = (0..reps)
            .filter(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                reject(wald_z(z * sd, sigma2, n).unwrap(), 0.05).unwrap()
            })
            .count();
        let rate = hits as f64 / reps as f64;
        assert!(
            (rate - 0.05).abs() < 3.0 * (0.05 * 0.95 / reps as f64).sqrt(),
            "{rate}"
        );
    }

    proptest! {
        #[test]
        fn ceiling_is_sharp(delta in 0.05f64..3.0, sigma2 in 0.01f64..5.0, alpha in 0.001f64..0.2, beta in 0.05f64..0.5) {
            let n = required_n(delta, sigma2, alpha, beta).unwrap();
            prop_assert!(analytic_power(delta, sigma2, n, alpha).unwrap() >= 1.0 - beta - 1e-12);
            if n > 1 {
                prop_assert!(analytic_power(delta, sigma2, n - 1, alpha).unwrap() < 1.0 - beta);
            }
        }

        #[test]
        fn monotone(delta in 0.05f64..3.0, sigma2 in 0.01f64..5.0, alpha in 0.01f64..0.2, beta in 0.05f64..0.5) {
            let n = required_n(delta, sigma2, alpha, beta).unwrap();
            prop_assert!(required_n(delta * 1.1, sigma2, alpha, beta).unwrap() <= n);
            prop_assert!(required_n(-delta, sigma2, alpha, beta).unwrap() == n);
            prop_assert!(required_n(delta, sigma2 * 1.1, alpha, beta).unwrap() >= n);
            prop_assert!(required_n(delta, sigma2, alpha * 0.5, beta).unwrap() >= n);
            prop_assert!(required_n(delta, sigma2, alpha, beta * 0.5).unwrap() >= n);
        }
    }
}
