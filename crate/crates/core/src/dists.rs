//! Skew-normal and skew-t error laws: analytic moments and sampling.
//!
//! A draw is built as `W = ξ + σ₁·X/√V` where `X = κ|Z₀| + √(1−κ²)·Z₁`
//! is skew-normal with `κ = λ/√(1+λ²)` and `V ~ χ²_ν/ν`. With `ν = ∞` the
//! `V` factor is dropped and `W` is skew-normal.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::special::half_gamma_ratio;
use crate::{Error, Result};

/// Degrees of freedom, with infinity as an explicit value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dof {
    Finite(f64),
    Infinite,
}

impl Dof {
    pub fn new(nu: f64) -> Result<Self> {
        if nu == f64::INFINITY {
            Ok(Dof::Infinite)
        } else if nu.is_finite() && nu > 0.0 {
            Ok(Dof::Finite(nu))
        } else {
            Err(Error::InvalidArgument(format!(
                "degrees of freedom must be > 0 or inf, got {nu}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Dof::Finite(v) => v,
            Dof::Infinite => f64::INFINITY,
        }
    }

    fn require_above(self, order: u32, bound: f64) -> Result<()> {
        match self {
            Dof::Finite(nu) if nu <= bound => Err(Error::UndefinedMoment { order, nu }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Dof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dof::Finite(v) => write!(f, "{v}"),
            Dof::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewTParams {
    pub location: f64,
    pub scale: f64,
    pub lambda: f64,
    pub nu: Dof,
}

impl SkewTParams {
    pub fn new(location: f64, scale: f64, lambda: f64, nu: Dof) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if !location.is_finite() || !lambda.is_finite() {
            return Err(Error::InvalidArgument(
                "location and skewness must be finite".into(),
            ));
        }
        if let Dof::Finite(v) = nu {
            Dof::new(v)?;
        }
        Ok(Self {
            location,
            scale,
            lambda,
            nu,
        })
    }

    pub fn normal(scale: f64) -> Result<Self> {
        Self::new(0.0, scale, 0.0, Dof::Infinite)
    }

    pub fn kappa(&self) -> f64 {
        self.lambda / (1.0 + self.lambda * self.lambda).sqrt()
    }

    /// Mean of the standardized variable `X/√V`.
    fn unit_mean(&self) -> f64 {
        let k = self.kappa();
        match self.nu {
            Dof::Infinite => k * (2.0 / PI).sqrt(),
            Dof::Finite(nu) => k * (nu / PI).sqrt() * half_gamma_ratio(nu),
        }
    }

    /// `E[1/V] = ν/(ν−2)`, or 1 for the skew-normal.
    fn inv_v_mean(&self) -> f64 {
        match self.nu {
            Dof::Infinite => 1.0,
            Dof::Finite(nu) => nu / (nu - 2.0),
        }
    }
}

pub fn st_mean(p: &SkewTParams) -> Result<f64> {
    p.nu.require_above(1, 1.0)?;
    Ok(p.location + p.scale * p.unit_mean())
}

pub fn st_variance(p: &SkewTParams) -> Result<f64> {
    p.nu.require_above(2, 2.0)?;
    let m = p.unit_mean();
    Ok(p.scale * p.scale * (p.inv_v_mean() - m * m))
}

pub fn st_skewness(p: &SkewTParams) -> Result<f64> {
    p.nu.require_above(3, 3.0)?;
    let k = p.kappa();
    let m = p.unit_mean();
    match p.nu {
        Dof::Infinite => Ok(0.5 * (4.0 - PI) * m.powi(3) / (1.0 - m * m).powf(1.5)),
        Dof::Finite(nu) => {
            let bracket = nu * (3.0 - k * k) / (nu - 3.0) - 3.0 * nu / (nu - 2.0) + 2.0 * m * m;
            Ok(m * bracket * (nu / (nu - 2.0) - m * m).powf(-1.5))
        }
    }
}

/// Excess kurtosis.
pub fn st_kurtosis(p: &SkewTParams) -> Result<f64> {
    p.nu.require_above(4, 4.0)?;
    let k = p.kappa();
    let m = p.unit_mean();
    let m2 = m * m;
    match p.nu {
        Dof::Infinite => Ok(2.0 * (PI - 3.0) * m2 * m2 / ((1.0 - m2) * (1.0 - m2))),
        Dof::Finite(nu) => {
            let num = 3.0 * nu * nu / ((nu - 2.0) * (nu - 4.0))
                - 4.0 * m2 * nu * (3.0 - k * k) / (nu - 3.0)
                + 6.0 * m2 * nu / (nu - 2.0)
                - 3.0 * m2 * m2;
            let den = nu / (nu - 2.0) - m2;
            Ok(num / (den * den) - 3.0)
        }
    }
}

/// Reusable sampler; holds the χ² law so repeated draws avoid setup cost.
#[derive(Debug, Clone)]
pub struct SkewTSampler {
    params: SkewTParams,
    kappa: f64,
    ortho: f64,
    chi2: Option<ChiSquared<f64>>,
}

impl SkewTSampler {
    pub fn new(params: SkewTParams) -> Self {
        let kappa = params.kappa();
        let chi2 = match params.nu {
            Dof::Infinite => None,
            Dof::Finite(nu) => Some(ChiSquared::new(nu).expect("validated dof")),
        };
        Self {
            params,
            kappa,
            ortho: (1.0 - kappa * kappa).sqrt(),
            chi2,
        }
    }

    pub fn params(&self) -> &SkewTParams {
        &self.params
    }
}

impl Distribution<f64> for SkewTSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let x = self.kappa * z0.abs() + self.ortho * z1;
        let x = match &self.chi2 {
            None => x,
            Some(chi2) => {
                let nu = self.params.nu.value();
                x / (chi2.sample(rng) / nu).sqrt()
            }
        };
        self.params.location + self.params.scale * x
    }
}

pub fn sample_st<R: Rng + ?Sized>(p: &SkewTParams, n: usize, rng: &mut R) -> Vec<f64> {
    let s = SkewTSampler::new(*p);
    (0..n).map(|_| s.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats::{sample_excess_kurtosis, sample_skewness, Welford};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn st(scale: f64, lambda: f64, nu: f64) -> SkewTParams {
        SkewTParams::new(0.0, scale, lambda, Dof::new(nu).unwrap()).unwrap()
    }

    #[test]
    fn trivial_moments() {
        assert_eq!(st_mean(&st(1.0, 0.0, f64::INFINITY)).unwrap(), 0.0);
        assert_relative_eq!(
            st_mean(&st(1.0, 1.0, f64::INFINITY)).unwrap(),
            (1.0 / PI).sqrt(),
            max_relative = 1e-14
        );
        assert_eq!(st_variance(&st(1.0, 0.0, f64::INFINITY)).unwrap(), 1.0);
        assert_relative_eq!(
            st_variance(&st(1.0, 0.0, 6.0)).unwrap(),
            1.5,
            max_relative = 1e-14
        );
        assert_eq!(st_skewness(&st(1.0, 0.0, f64::INFINITY)).unwrap(), 0.0);
        assert_relative_eq!(
            st_kurtosis(&st(1.0, 0.0, 8.0)).unwrap(),
            1.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn undefined_moments_error() {
        assert!(matches!(
            st_mean(&st(1.0, 1.0, 1.0)),
            Err(Error::UndefinedMoment { order: 1, .. })
        ));
        assert!(st_variance(&st(1.0, 1.0, 2.0)).is_err());
        assert!(st_skewness(&st(1.0, 1.0, 3.0)).is_err());
        assert!(st_kurtosis(&st(1.0, 1.0, 4.0)).is_err());
        assert!(st_kurtosis(&st(1.0, 1.0, 4.5)).is_ok());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(Dof::new(0.0).is_err());
        assert!(Dof::new(f64::NAN).is_err());
        assert!(SkewTParams::new(0.0, 0.0, 1.0, Dof::Infinite).is_err());
    }

    #[test]
    fn large_dof_approaches_skew_normal() {
        for lambda in [0.0, 2.0, 10.0, -3.0] {
            let inf = st(0.95, lambda, f64::INFINITY);
            let big = st(0.95, lambda, 1e6);
            assert_relative_eq!(
                st_mean(&big).unwrap(),
                st_mean(&inf).unwrap(),
                max_relative = 1e-3,
                epsilon = 1e-12
            );
            assert_relative_eq!(
                st_variance(&big).unwrap(),
                st_variance(&inf).unwrap(),
                max_relative = 1e-3
            );
        }
    }

    #[test]
    fn skew_normal_kurtosis_is_limit_of_finite_form() {
        let inf = st_kurtosis(&st(1.0, 10.0, f64::INFINITY)).unwrap();
        let big = st_kurtosis(&st(1.0, 10.0, 1e7)).unwrap();
        assert!((inf - big).abs() < 1e-4);
        let inf = st_skewness(&st(1.0, 10.0, f64::INFINITY)).unwrap();
        let big = st_skewness(&st(1.0, 10.0, 1e7)).unwrap();
        assert!((inf - big).abs() < 1e-4);
    }

    #[test]
    fn mc_mean_skew_t() {
        let p = st(0.95, 10.0, 6.0);
        let mut r = rng::substream(11, &[rng::tag::ORACLE, 0]);
        let w: Welford = sample_st(&p, 10_000_000, &mut r).into_iter().collect();
        assert_relative_eq!(w.mean(), st_mean(&p).unwrap(), max_relative = 1e-2);
    }

    #[test]
    fn mc_variance_and_skewness() {
        let p = st(0.95, 2.0, 8.0);
        let mut r = rng::substream(12, &[rng::tag::ORACLE, 1]);
        let w: Welford = sample_st(&p, 10_000_000, &mut r).into_iter().collect();
        assert_relative_eq!(w.variance(), st_variance(&p).unwrap(), max_relative = 2e-2);

        let p = st(1.0, 10.0, 10.0);
        let xs = sample_st(&p, 10_000_000, &mut r);
        assert!((sample_skewness(&xs) - st_skewness(&p).unwrap()).abs() < 0.05);
    }

    #[test]
    fn skew_normal_mean_within_three_se() {
        let p = st(1.0, 2.0, f64::INFINITY);
        let mut r = rng::substream(13, &[rng::tag::ORACLE, 2]);
        let w: Welford = sample_st(&p, 1_000_000, &mut r).into_iter().collect();
        assert!((w.mean() - st_mean(&p).unwrap()).abs() < 3.0 * w.std_err());
    }

    #[test]
    fn heavy_skewed_sample_shape() {
        let p = st(1.0, 10.0, 6.0);
        let mut r = rng::substream(14, &[rng::tag::ORACLE, 3]);
        let xs = sample_st(&p, 1_000_000, &mut r);
        assert!(sample_skewness(&xs) > 0.0);
        assert!(sample_excess_kurtosis(&xs) > 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = st(0.95, 2.0, 6.0);
        let a = sample_st(&p, 100, &mut rng::from_seed(5));
        let b = sample_st(&p, 100, &mut rng::from_seed(5));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn mean_sign_follows_lambda(lambda in -20.0f64..20.0, nu in prop_oneof![Just(f64::INFINITY), 1.5f64..50.0]) {
            let m = st_mean(&st(1.0, lambda, nu)).unwrap();
            prop_assert_eq!(m.partial_cmp(&0.0), lambda.partial_cmp(&0.0));
        }

        #[test]
        fn variance_positive(scale in 0.1f64..5.0, lambda in -20.0f64..20.0, nu in prop_oneof![Just(f64::INFINITY), 2.1f64..100.0]) {
            prop_assert!(st_variance(&st(scale, lambda, nu)).unwrap() > 0.0);
        }
    }
}
