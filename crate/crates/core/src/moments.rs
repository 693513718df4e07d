//! Per-path moments of the cluster-averaged outcome and the IPW regime
//! algebra built on them.
//!
//! Every variance-like quantity here is on the `N × Var` scale; division by
//! the sample size happens only when reporting standard errors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::SmartDesign;
use crate::dists::{SkewTParams, SkewTSampler};
use crate::missing::MissingnessParams;
use crate::rng::{self, RngStream};
use crate::spatial::{CarModel, SpdMatrix};
use crate::stats::Welford;
use crate::{Error, Result};

/// Replicates per independently seeded block.
pub const BLOCK: usize = 8192;

/// Maximum tolerated fraction of all-missing clusters.
pub const MAX_REDRAW_RATE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub car: CarModel,
    pub st: SkewTParams,
    pub mp: MissingnessParams,
    sigma: SpdMatrix,
}

impl OutcomeModel {
    pub fn new(car: CarModel, st: SkewTParams, mp: MissingnessParams) -> Result<Self> {
        if st.location != 0.0 {
            return Err(Error::InvalidArgument(
                "the error law must have location 0; path means carry the location".into(),
            ));
        }
        let sigma = car.covariance()?;
        Ok(Self { car, st, mp, sigma })
    }

    pub fn sigma(&self) -> &SpdMatrix {
        &self.sigma
    }

    pub fn teeth(&self) -> usize {
        self.sigma.dim()
    }
}

/// Draws tooth-level data for one cluster.
pub struct ClusterSampler<'a> {
    model: &'a OutcomeModel,
    eps1: SkewTSampler,
    z: Vec<f64>,
    q: Vec<f64>,
    observed: Vec<bool>,
}

/// Outcome of one accepted cluster draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterDraw {
    pub ybar: f64,
    pub n_available: usize,
    /// All-missing draws rejected before this one.
    pub redraws: u64,
}

impl<'a> ClusterSampler<'a> {
    pub fn new(model: &'a OutcomeModel) -> Self {
        let t = model.teeth();
        Self {
            model,
            eps1: SkewTSampler::new(model.st),
            z: vec![0.0; t],
            q: vec![0.0; t],
            observed: vec![false; t],
        }
    }

    /// Draws `(Q, ε₀)` until at least one tooth is observed, then the errors
    /// of the observed teeth, and returns the mean observed outcome.
    pub fn draw<R: Rng + ?Sized>(&mut self, mu: &[f64], rng: &mut R) -> ClusterDraw {
        let mp = &self.model.mp;
        let mut redraws = 0;
        let n_available = loop {
            self.model.sigma.sample_into(rng, &mut self.z, &mut self.q);
            let mut n = 0;
            for (obs, &q) in self.observed.iter_mut().zip(&self.q) {
                let e0: f64 = rng.sample(StandardNormal);
                *obs = !mp.is_missing(q, mp.sigma0 * e0);
                n += *obs as usize;
            }
            if n > 0 {
                break n;
            }
            redraws += 1;
        };
        let mut sum = 0.0;
        for t in 0..self.q.len() {
            if self.observed[t] {
                sum += mu[t] + self.q[t] + self.eps1.sample(rng);
            }
        }
        ClusterDraw {
            ybar: sum / n_available as f64,
            n_available,
            redraws,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMoments {
    pub path: usize,
    pub mu: f64,
    pub sigma2: f64,
    pub n_samples: u64,
    pub se_mu: f64,
    pub redraws: u64,
}

/// Monte Carlo mean and variance of `Ȳ` for clusters following one path.
///
/// Replicates are split into blocks of [`BLOCK`], each with its own stream
/// keyed by `(seed, path, block)`; block summaries are merged in block order,
/// so the result does not depend on the thread count.
pub fn estimate_path_moments(
    path: usize,
    mu: &[f64],
    model: &OutcomeModel,
    num: usize,
    seed: u64,
) -> Result<PathMoments> {
    if num < 2 {
        return Err(Error::InvalidArgument(format!(
            "Num must be at least 2, got {num}"
        )));
    }
    if mu.len() != model.teeth() {
        return Err(Error::InvalidArgument(format!(
            "path {} has {} tooth means but the model has {} teeth",
            path + 1,
            mu.len(),
            model.teeth()
        )));
    }
    let n_blocks = num.div_ceil(BLOCK);
    let blocks: Vec<(Welford, u64)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let len = BLOCK.min(num - b * BLOCK);
            let mut r: RngStream =
                rng::substream(seed, &[rng::tag::PATH_MOMENTS, path as u64, b as u64]);
            let mut sampler = ClusterSampler::new(model);
            let mut w = Welford::new();
            let mut redraws = 0;
            for _ in 0..len {
                let d = sampler.draw(mu, &mut r);
                w.push(d.ybar);
                redraws += d.redraws;
            }
            (w, redraws)
        })
        .collect();
    let mut w = Welford::new();
    let mut redraws = 0;
    for (bw, br) in &blocks {
        w.merge(bw);
        redraws += br;
    }
    let attempts = num as u64 + redraws;
    if redraws as f64 > MAX_REDRAW_RATE * attempts as f64 {
        return Err(Error::DegenerateMissingness { redraws, attempts });
    }
    Ok(PathMoments {
        path,
        mu: w.mean(),
        sigma2: w.variance(),
        n_samples: w.count(),
        se_mu: w.std_err(),
        redraws,
    })
}

/// Moments for the listed paths of a design, keyed by path index.
pub fn estimate_design_paths(
    design: &SmartDesign,
    paths: &[usize],
    model: &OutcomeModel,
    num: usize,
    seed: u64,
) -> Result<BTreeMap<usize, PathMoments>> {
    let mut out = BTreeMap::new();
    for &p in paths {
        if out.contains_key(&p) {
            continue;
        }
        let path = design
            .paths
            .get(p)
            .ok_or_else(|| Error::InvalidArgument(format!("path {} does not exist", p + 1)))?;
        out.insert(p, estimate_path_moments(p, &path.mu, model, num, seed)?);
    }
    Ok(out)
}

/// Everything the closed-form algebra needs about one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeStats {
    pub arm: usize,
    pub responder_path: usize,
    pub nonresp_path: usize,
    pub gamma: f64,
    pub pi1: f64,
    pub pi2r: f64,
    pub pi2nr: f64,
    pub mu_r: f64,
    pub s2_r: f64,
    pub mu_nr: f64,
    pub s2_nr: f64,
}

impl RegimeStats {
    pub fn from_design(
        d: &SmartDesign,
        id: usize,
        pm: &BTreeMap<usize, PathMoments>,
    ) -> Result<Self> {
        let r = d.regime(id)?;
        let get = |p: usize| {
            pm.get(&p).ok_or_else(|| {
                Error::InvalidArgument(format!("no moments estimated for path {}", p + 1))
            })
        };
        let (rp, np) = (get(r.responder_path)?, get(r.nonresp_path)?);
        Ok(Self {
            arm: r.arm,
            responder_path: r.responder_path,
            nonresp_path: r.nonresp_path,
            gamma: d.arms[r.arm].gamma,
            pi1: d.stage1_probs()[r.arm],
            pi2r: d.stage2_prob(r.responder_path)?,
            pi2nr: d.stage2_prob(r.nonresp_path)?,
            mu_r: rp.mu,
            s2_r: rp.sigma2,
            mu_nr: np.mu,
            s2_nr: np.sigma2,
        })
    }

    fn check_probs(&self) -> Result<()> {
        for (name, p) in [
            ("pi1", self.pi1),
            ("pi2 (responder)", self.pi2r),
            ("pi2 (non-responder)", self.pi2nr),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1], got {p}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "response rate must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `γ·μ_R + (1−γ)·μ_NR`.
pub fn regime_mean(r: &RegimeStats) -> f64 {
    r.gamma * r.mu_r + (1.0 - r.gamma) * r.mu_nr
}

/// `N·Var` of the IPW regime mean.
pub fn regime_variance(r: &RegimeStats) -> Result<f64> {
    r.check_probs()?;
    let pr = r.pi1 * r.pi2r;
    let pnr = r.pi1 * r.pi2nr;
    let g = r.gamma;
    Ok(g / pr * (r.s2_r + (1.0 - pr) * r.mu_r * r.mu_r)
        + (1.0 - g) / pnr * (r.s2_nr + (1.0 - pnr) * r.mu_nr * r.mu_nr)
        + g * (1.0 - g) * (r.mu_r - r.mu_nr).powi(2))
}

/// `N·Cov` of two IPW regime means.
///
/// `shared` states whether the regimes start on the same arm; it must agree
/// with the arms recorded in `a` and `b`. For a shared arm every path common
/// to both regimes contributes `P(path)/(π₁π₂)·(σ² + μ²)`; with a single
/// responder option that is just the responder path. Distinct arms have no
/// overlapping clusters, leaving `−μ_a·μ_b`.
pub fn regime_covariance(a: &RegimeStats, b: &RegimeStats, shared: bool) -> Result<f64> {
    a.check_probs()?;
    b.check_probs()?;
    if shared != (a.arm == b.arm) {
        return Err(Error::InvalidArgument(format!(
            "regimes are on arms {} and {} but were declared {}",
            a.arm + 1,
            b.arm + 1,
            if shared {
                "as sharing an initial treatment"
            } else {
                "as not sharing an initial treatment"
            }
        )));
    }
    let mut overlap = 0.0;
    if shared {
        if a.responder_path == b.responder_path {
            overlap += a.gamma / (a.pi1 * a.pi2r) * (a.s2_r + a.mu_r * a.mu_r);
        }
        if a.nonresp_path == b.nonresp_path {
            overlap += (1.0 - a.gamma) / (a.pi1 * a.pi2nr) * (a.s2_nr + a.mu_nr * a.mu_nr);
        }
    }
    Ok(overlap - regime_mean(a) * regime_mean(b))
}

/// Effect size and its variance components, `N×` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub ybard1: f64,
    pub ybard2: f64,
    pub delta: f64,
    pub sig_d1_sq: f64,
    pub sig_d2_sq: f64,
    pub sig_d1d2: f64,
    pub sig_e_sq: f64,
}

impl EffectSize {
    /// `σ² = sig.e.sq / 2`, so that `Var(δ̂) = 2σ²/N`.
    pub fn sigma2(&self) -> f64 {
        self.sig_e_sq / 2.0
    }

    pub fn delta_std(&self) -> Result<f64> {
        let scale = self.sig_d1_sq.abs() + self.sig_d2_sq.abs();
        if !(self.sig_e_sq > 1e-12 * scale) {
            return Err(Error::Degenerate(format!(
                "variance of the contrast is {:e}; the standardized effect is undefined",
                self.sig_e_sq
            )));
        }
        Ok(self.delta / self.sigma2().sqrt())
    }
}

/// Single regime (`second = None`) or a pair.
pub fn effect_size(first: &RegimeStats, second: Option<&RegimeStats>) -> Result<EffectSize> {
    let m1 = regime_mean(first);
    let v1 = regime_variance(first)?;
    Ok(match second {
        None => EffectSize {
            ybard1: m1,
            ybard2: 0.0,
            delta: m1,
            sig_d1_sq: v1,
            sig_d2_sq: 0.0,
            sig_d1d2: 0.0,
            sig_e_sq: v1,
        },
        Some(s) => {
            let m2 = regime_mean(s);
            let v2 = regime_variance(s)?;
            let c = regime_covariance(first, s, first.arm == s.arm)?;
            EffectSize {
                ybard1: m1,
                ybard2: m2,
                delta: m1 - m2,
                sig_d1_sq: v1,
                sig_d2_sq: v2,
                sig_d1d2: c,
                sig_e_sq: v1 + v2 - 2.0 * c,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::Dof;
    use crate::spatial::AdjacencyGraph;
    use proptest::prelude::*;

    fn model(t: usize, tau: f64, a0: f64, b0: f64) -> OutcomeModel {
        let car = CarModel::new(AdjacencyGraph::dental(t).unwrap(), tau, 0.975).unwrap();
        OutcomeModel::new(
            car,
            SkewTParams::normal(0.95).unwrap(),
            MissingnessParams::new(a0, b0, 1.0, 0.0).unwrap(),
        )
        .unwrap()
    }

    fn rs(
        gamma: f64,
        pi1: f64,
        pi2r: f64,
        pi2nr: f64,
        mu_r: f64,
        s2_r: f64,
        mu_nr: f64,
        s2_nr: f64,
    ) -> RegimeStats {
        RegimeStats {
            arm: 0,
            responder_path: 0,
            nonresp_path: 1,
            gamma,
            pi1,
            pi2r,
            pi2nr,
            mu_r,
            s2_r,
            mu_nr,
            s2_nr,
        }
    }

    #[test]
    fn no_missingness_tiny_tau_averages_errors() {
        let m = model(28, 1e-6, -30.0, 0.0);
        let pm = estimate_path_moments(0, &[0.0; 28], &m, 200_000, 1).unwrap();
        let want = 0.95f64.powi(2) / 28.0;
        assert!(pm.mu.abs() < 3.0 * pm.se_mu);
        // SE of a normal sample variance is σ²√(2/n).
        assert!((pm.sigma2 - want).abs() < 3.0 * want * (2.0 / 200_000.0f64).sqrt());
        assert_eq!(pm.redraws, 0);
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let m = model(28, 0.85, -1.0, 0.5);
        let mu = [2.0; 28];
        let a = rng::with_workers(1, || estimate_path_moments(3, &mu, &m, 30_000, 9).unwrap());
        let b = rng::with_workers(4, || estimate_path_moments(3, &mu, &m, 30_000, 9).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.mu.to_bits(), b.mu.to_bits());
    }

    #[test]
    fn se_halves_with_four_times_num() {
        let m = model(28, 0.85, -1.0, 0.5);
        let a = estimate_path_moments(0, &[0.0; 28], &m, 40_000, 2).unwrap();
        let b = estimate_path_moments(0, &[0.0; 28], &m, 160_000, 2).unwrap();
        let ratio = a.se_mu / b.se_mu;
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn heavy_missingness_is_rejected() {
        let m = model(4, 0.85, 3.0, 0.0);
        let r = estimate_path_moments(0, &[0.0; 4], &m, 20_000, 1);
        assert!(
            matches!(r, Err(Error::DegenerateMissingness { .. })),
            "{r:?}"
        );
    }

    #[test]
    fn skew_t_error_shifts_mean() {
        let car = CarModel::new(AdjacencyGraph::dental(4).unwrap(), 1e-6, 0.5).unwrap();
        let st = SkewTParams::new(0.0, 0.95, 10.0, Dof::Finite(6.0)).unwrap();
        let m = OutcomeModel::new(
            car,
            st,
            MissingnessParams::new(-30.0, 0.0, 1.0, 0.0).unwrap(),
        )
        .unwrap();
        let pm = estimate_path_moments(0, &[0.0; 4], &m, 100_000, 4).unwrap();
        let want = crate::dists::st_mean(&st).unwrap();
        assert!((pm.mu - want).abs() < 4.0 * pm.se_mu);
    }

    #[test]
    fn regime_mean_cases() {
        assert_eq!(
            regime_mean(&rs(1.0, 0.5, 1.0, 0.25, 3.0, 1.0, 7.0, 1.0)),
            3.0
        );
        assert_eq!(
            regime_mean(&rs(0.5, 0.5, 1.0, 0.25, 0.0, 1.0, 2.0, 1.0)),
            1.0
        );
    }

    #[test]
    fn regime_variance_cases() {
        assert_eq!(
            regime_variance(&rs(1.0, 1.0, 1.0, 1.0, 3.0, 0.7, 0.0, 0.0)).unwrap(),
            0.7
        );
        let v = regime_variance(&rs(0.5, 0.5, 1.0, 0.25, 0.0, 1.0, 0.0, 1.0)).unwrap();
        assert!((v - 5.0).abs() < 1e-14);
        assert!(regime_variance(&rs(0.5, 0.0, 1.0, 0.25, 0.0, 1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn covariance_cases() {
        let a = rs(0.3, 0.5, 1.0, 0.25, 0.0, 1.0, 0.0, 2.0);
        let mut b = a;
        b.arm = 1;
        b.responder_path = 5;
        b.nonresp_path = 6;
        assert_eq!(regime_covariance(&a, &b, false).unwrap(), 0.0);
        assert!(regime_covariance(&a, &b, true).is_err());

        let a = rs(1.0, 1.0, 1.0, 0.25, 1.5, 0.8, 0.0, 0.0);
        let mut c = a;
        c.nonresp_path = 2;
        assert!((regime_covariance(&a, &c, true).unwrap() - 0.8).abs() < 1e-14);
    }

    #[test]
    fn identical_regimes_have_no_standardized_effect() {
        let a = rs(0.3, 0.5, 1.0, 0.25, 0.2, 1.0, 2.0, 2.0);
        let e = effect_size(&a, Some(&a)).unwrap();
        assert_eq!(e.delta, 0.0);
        assert!(e.delta_std().is_err());
    }

    proptest! {
        #[test]
        fn variance_bounds(g in 0.0f64..=1.0, pi1 in 0.05f64..0.95, pi2r in 0.05f64..=1.0, pi2nr in 0.05f64..=1.0,
                           mu_r in -5.0f64..5.0, mu_nr in -5.0f64..5.0, s2_r in 0.0f64..3.0, s2_nr in 0.0f64..3.0,
                           g2 in 0.0f64..=1.0, pi2nr_b in 0.05f64..=1.0, mu_nr_b in -5.0f64..5.0, s2_nr_b in 0.0f64..3.0) {
            let a = rs(g, pi1, pi2r, pi2nr, mu_r, s2_r, mu_nr, s2_nr);
            let v = regime_variance(&a).unwrap();
            prop_assert!(v >= g * (1.0 - g) * (mu_r - mu_nr).powi(2) - 1e-12);

            // Same arm, same responder path, different non-responder path;
            // two non-responder options cap π₂NR at 1/2.
            let a = rs(g, pi1, pi2r, pi2nr.min(0.5), mu_r, s2_r, mu_nr, s2_nr);
            let mut b = rs(g, pi1, pi2r, pi2nr.min(0.5), mu_r, s2_r, mu_nr_b, s2_nr_b);
            b.nonresp_path = 2;
            let e = effect_size(&a, Some(&b)).unwrap();
            prop_assert!(e.sig_e_sq >= -1e-9 * (e.sig_d1_sq + e.sig_d2_sq));

            // Distinct arms.
            let mut c = rs(g2, 1.0 - pi1, pi2r, pi2nr_b, mu_r, s2_r, mu_nr_b, s2_nr_b);
            c.arm = 1;
            let e = effect_size(&a, Some(&c)).unwrap();
            prop_assert!(e.sig_e_sq >= 0.0);
        }
    }
}
