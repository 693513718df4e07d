//! Shared-parameter probit missingness.
//!
//! Tooth `t` is missing when `a₀ + b₀·Q_t + ε₀ > c₀` with `ε₀ ~ N(0, σ₀²)`.
//! Because `Q` also enters the outcome, missingness is informative.

use crate::dists::{st_variance, SkewTParams};
use crate::roots::brent;
use crate::spatial::SpdMatrix;
use crate::special::normal_cdf;
pub use crate::special::normal_quantile;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingnessParams {
    pub a0: f64,
    pub b0: f64,
    pub sigma0: f64,
    pub cutoff: f64,
}

impl MissingnessParams {
    pub fn new(a0: f64, b0: f64, sigma0: f64, cutoff: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma0 must be positive, got {sigma0}"
            )));
        }
        if !(a0.is_finite() && b0.is_finite() && cutoff.is_finite()) {
            return Err(Error::InvalidArgument(
                "a0, b0 and cutoff must be finite".into(),
            ));
        }
        Ok(Self {
            a0,
            b0,
            sigma0,
            cutoff,
        })
    }

    /// Probability that a tooth with latent variance `var_q` is observed.
    #[inline]
    pub fn tooth_available(&self, var_q: f64) -> f64 {
        let sd = (self.b0 * self.b0 * var_q + self.sigma0 * self.sigma0).sqrt();
        normal_cdf((self.cutoff - self.a0) / sd)
    }

    /// Missingness indicator for one tooth given its latent effect and noise.
    #[inline]
    pub fn is_missing(&self, q: f64, eps0: f64) -> bool {
        self.a0 + self.b0 * q + eps0 > self.cutoff
    }
}

/// Expected proportion of available teeth per cluster.
pub fn prob_available(mp: &MissingnessParams, sigma: &SpdMatrix) -> f64 {
    let d = sigma.diag();
    d.iter().map(|&v| mp.tooth_available(v)).sum::<f64>() / d.len() as f64
}

fn corr_for_b0(b0: f64, sigma0: f64, diag: &[f64], var_eps: f64) -> f64 {
    let s02 = sigma0 * sigma0;
    diag.iter()
        .map(|&v| b0 * v / ((v + var_eps) * (b0 * b0 * v + s02)).sqrt())
        .sum::<f64>()
        / diag.len() as f64
}

/// Per-tooth Pearson correlation between `Y_t` and the latent `M_t0`.
pub fn corr_per_tooth(
    mp: &MissingnessParams,
    sigma: &SpdMatrix,
    st: &SkewTParams,
) -> Result<Vec<f64>> {
    let var_eps = st_variance(st)?;
    Ok(sigma
        .diag()
        .into_iter()
        .map(|v| corr_for_b0(mp.b0, mp.sigma0, &[v], var_eps))
        .collect())
}

/// Tooth-averaged outcome/missingness correlation `c_i`.
pub fn corr_y_m(mp: &MissingnessParams, sigma: &SpdMatrix, st: &SkewTParams) -> Result<f64> {
    let var_eps = st_variance(st)?;
    Ok(corr_for_b0(mp.b0, mp.sigma0, &sigma.diag(), var_eps))
}

/// Supremum of `c_i` as `b₀ → ∞`.
pub fn max_attainable_corr(sigma: &SpdMatrix, st: &SkewTParams) -> Result<f64> {
    let var_eps = st_variance(st)?;
    let d = sigma.diag();
    Ok(d.iter().map(|&v| (v / (v + var_eps)).sqrt()).sum::<f64>() / d.len() as f64)
}

/// Recovers `(a₀, b₀)` from target availability `p` and correlation `c`.
pub fn solve_missingness(
    p_target: f64,
    c_target: f64,
    sigma: &SpdMatrix,
    st: &SkewTParams,
    sigma0: f64,
    cutoff: f64,
) -> Result<MissingnessParams> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p_i must lie in (0, 1), got {p_target}"
        )));
    }
    if !c_target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "c_i must be finite, got {c_target}"
        )));
    }
    MissingnessParams::new(0.0, 0.0, sigma0, cutoff)?;
    let var_eps = st_variance(st)?;
    let diag = sigma.diag();
    let bound = max_attainable_corr(sigma, st)?;
    let target = c_target.abs();
    if target >= bound {
        return Err(Error::InfeasibleTarget {
            target: c_target,
            bound,
        });
    }

    let b0 = if target == 0.0 {
        0.0
    } else {
        let f = |b: f64| corr_for_b0(b, sigma0, &diag, var_eps) - target;
        let mut hi = 1.0;
        while f(hi) <= 0.0 {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::NoConvergence {
                    iterations: crate::roots::MAX_ITER,
                });
            }
        }
        brent(f, 0.0, hi, 1e-14 * hi.max(1.0))?
    };
    let b0 = b0.copysign(c_target);

    let a0 = if b0 == 0.0 {
        cutoff - sigma0 * normal_quantile(p_target)?
    } else {
        let mp = |a0: f64| MissingnessParams {
            a0,
            b0,
            sigma0,
            cutoff,
        };
        let f = |a0: f64| prob_available(&mp(a0), sigma) - p_target;
        let (mut lo, mut hi) = (-20.0, 20.0);
        while f(lo) < 0.0 {
            lo *= 2.0;
            if lo < -1e300 {
                return Err(Error::NoConvergence {
                    iterations: crate::roots::MAX_ITER,
                });
            }
        }
        while f(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::NoConvergence {
                    iterations: crate::roots::MAX_ITER,
                });
            }
        }
        brent(f, lo, hi, 1e-13)?
    };
    MissingnessParams::new(a0, b0, sigma0, cutoff)
}
