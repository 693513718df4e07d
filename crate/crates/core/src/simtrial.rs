//! Whole-trial simulation, IPW estimation and Monte Carlo power.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::SmartDesign;
use crate::moments::{ClusterSampler, OutcomeModel, MAX_REDRAW_RATE};
use crate::power::{reject, wald_z, TestKind, TestSpec};
use crate::rng::{self, RngStream};
use crate::stats::Welford;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub arm: usize,
    pub responder: bool,
    pub path: usize,
    pub ybar: f64,
    pub n_teeth: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialDataset {
    pub clusters: Vec<ClusterRecord>,
    pub redraws: u64,
}

/// Classifies a one- or two-regime contrast.
pub fn test_kind(d: &SmartDesign, regimes: &[usize]) -> Result<TestKind> {
    match regimes {
        [a] => {
            d.regime(*a)?;
            Ok(TestKind::SingleRegime)
        }
        [a, b] => {
            let (ra, rb) = (d.regime(*a)?, d.regime(*b)?);
            Ok(if ra.arm == rb.arm {
                TestKind::SharedPair
            } else {
                TestKind::DistinctPair
            })
        }
        _ => Err(Error::InvalidArgument(format!(
            "expected one or two regimes, got {}",
            regimes.len()
        ))),
    }
}

/// Precomputed randomization tables for repeated trial draws.
struct Plan<'a> {
    design: &'a SmartDesign,
    cum_pi1: Vec<f64>,
    options: Vec<[Vec<usize>; 2]>,
}

impl<'a> Plan<'a> {
    fn new(design: &'a SmartDesign) -> Self {
        let mut acc = 0.0;
        let cum_pi1 = design
            .stage1_probs()
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let options = (0..design.arms.len())
            .map(|a| [design.paths_of(a, false), design.paths_of(a, true)])
            .collect();
        Self {
            design,
            cum_pi1,
            options,
        }
    }

    fn draw_assignment<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, bool, usize) {
        let u: f64 = rng.random();
        let arm = self
            .cum_pi1
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cum_pi1.len() - 1);
        let responder = rng.random::<f64>() < self.design.arms[arm].gamma;
        let opts = &self.options[arm][responder as usize];
        let path = opts[rng.random_range(0..opts.len())];
        (arm, responder, path)
    }
}

fn simulate_with<R: Rng + ?Sized>(
    plan: &Plan,
    model: &OutcomeModel,
    n: usize,
    rng: &mut R,
) -> TrialDataset {
    let mut sampler = ClusterSampler::new(model);
    let mut ds = TrialDataset {
        clusters: Vec::with_capacity(n),
        redraws: 0,
    };
    for _ in 0..n {
        let (arm, responder, path) = plan.draw_assignment(rng);
        let draw = sampler.draw(&plan.design.paths[path].mu, rng);
        ds.redraws += draw.redraws;
        ds.clusters.push(ClusterRecord {
            arm,
            responder,
            path,
            ybar: draw.ybar,
            n_teeth: draw.n_available,
        });
    }
    ds
}

fn check_redraws(redraws: u64, accepted: u64) -> Result<()> {
    let attempts = accepted + redraws;
    if redraws as f64 > MAX_REDRAW_RATE * attempts as f64 {
        return Err(Error::DegenerateMissingness { redraws, attempts });
    }
    Ok(())
}

/// One simulated trial of `n` clusters.
pub fn simulate_trial<R: Rng + ?Sized>(
    d: &SmartDesign,
    model: &OutcomeModel,
    n: usize,
    rng: &mut R,
) -> Result<TrialDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "trial size must be at least 1".into(),
        ));
    }
    if model.teeth() != d.teeth {
        return Err(Error::InvalidArgument(format!(
            "design has {} teeth per cluster but the spatial model has {}",
            d.teeth,
            model.teeth()
        )));
    }
    let ds = simulate_with(&Plan::new(d), model, n, rng);
    check_redraws(ds.redraws, n as u64)?;
    Ok(ds)
}

/// IPW weight of each cluster for one regime.
pub fn ipw_weights(ds: &TrialDataset, d: &SmartDesign, regime: usize) -> Result<Vec<f64>> {
    let r = d.regime(regime)?;
    let pi1 = d.stage1_probs()[r.arm];
    let wr = 1.0 / (pi1 * d.stage2_prob(r.responder_path)?);
    let wnr = 1.0 / (pi1 * d.stage2_prob(r.nonresp_path)?);
    Ok(ds
        .clusters
        .iter()
        .map(|c| {
            if c.responder && c.path == r.responder_path {
                wr
            } else if !c.responder && c.path == r.nonresp_path {
                wnr
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwEstimate {
    pub delta_hat: f64,
    /// Per-cluster contributions `W₁Ȳ − W₂Ȳ`; their mean is `δ̂`.
    pub contributions: Vec<f64>,
    /// Regimes with no consistent cluster in the dataset.
    pub empty_regimes: Vec<usize>,
}

/// `δ̂ = (1/N)·Σ W_iȲ_i`, or the difference of two such means.
pub fn ipw_estimate(ds: &TrialDataset, d: &SmartDesign, regimes: &[usize]) -> Result<IpwEstimate> {
    test_kind(d, regimes)?;
    if ds.clusters.is_empty() {
        return Err(Error::InvalidArgument("dataset has no clusters".into()));
    }
    let mut contributions = vec![0.0; ds.clusters.len()];
    let mut empty_regimes = Vec::new();
    for (k, &id) in regimes.iter().enumerate() {
        let sign = if k == 0 { 1.0 } else { -1.0 };
        let w = ipw_weights(ds, d, id)?;
        if w.iter().all(|&x| x == 0.0) {
            empty_regimes.push(id);
        }
        for ((c, wi), cl) in contributions.iter_mut().zip(&w).zip(&ds.clusters) {
            *c += sign * wi * cl.ybar;
        }
    }
    let delta_hat = contributions.iter().sum::<f64>() / ds.clusters.len() as f64;
    Ok(IpwEstimate {
        delta_hat,
        contributions,
        empty_regimes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub power: f64,
    pub reps: usize,
    pub mean_delta_hat: f64,
    pub mean_abs_delta_hat: f64,
    pub mcsd: f64,
    pub se_power: f64,
    pub redraws: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    pub reps: usize,
    pub seed: u64,
    /// Replace the design-stage σ² in the Wald statistic by a per-dataset
    /// estimate.
    pub empirical_variance: bool,
}

/// Per-replicate results, in replicate order.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub delta_hat: f64,
    pub z: f64,
    pub rejected: bool,
}

/// Fraction of simulated trials of size `n` in which the Wald test rejects.
///
/// `sigma2` is the design-stage `σ²` (half the `N·Var` of the contrast).
pub fn mc_power(
    d: &SmartDesign,
    model: &OutcomeModel,
    test: &TestSpec,
    regimes: &[usize],
    sigma2: f64,
    n: u64,
    opts: &PowerOptions,
) -> Result<PowerEstimate> {
    let (est, _) = mc_power_detailed(d, model, test, regimes, sigma2, n, opts, None)?;
    Ok(est)
}

/// [`mc_power`] that also returns per-replicate results and, when a writer
/// is given, dumps every simulated cluster as CSV.
#[allow(clippy::too_many_arguments)]
pub fn mc_power_detailed(
    d: &SmartDesign,
    model: &OutcomeModel,
    test: &TestSpec,
    regimes: &[usize],
    sigma2: f64,
    n: u64,
    opts: &PowerOptions,
    dump: Option<&mut dyn Write>,
) -> Result<(PowerEstimate, Vec<Replicate>)> {
    if opts.reps < 100 {
        return Err(Error::InvalidArgument(format!(
            "reps must be at least 100, got {}",
            opts.reps
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "trial size must be at least 1".into(),
        ));
    }
    let kind = test_kind(d, regimes)?;
    if kind != test.kind {
        return Err(Error::InvalidArgument(format!(
            "regimes {regimes:?} form a {kind:?} contrast, not {:?}",
            test.kind
        )));
    }
    if model.teeth() != d.teeth {
        return Err(Error::InvalidArgument(format!(
            "design has {} teeth per cluster but the spatial model has {}",
            d.teeth,
            model.teeth()
        )));
    }
    if !opts.empirical_variance && !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma^2 must be positive, got {sigma2}"
        )));
    }
    let plan = Plan::new(d);
    let keep = dump.is_some();
    let results: Vec<Result<(Replicate, u64, Option<TrialDataset>)>> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| {
            let mut r: RngStream = rng::substream(opts.seed, &[rng::tag::TRIAL, rep as u64]);
            let ds = simulate_with(&plan, model, n as usize, &mut r);
            let est = ipw_estimate(&ds, d, regimes)?;
            let s2 = if opts.empirical_variance {
                let w: Welford = est.contributions.iter().copied().collect();
                w.variance() / 2.0
            } else {
                sigma2
            };
            let (z, rejected) = if s2 > 0.0 {
                let z = wald_z(est.delta_hat, s2, n)?;
                (z, reject(z, test.alpha)?)
            } else {
                (0.0, false)
            };
            let redraws = ds.redraws;
            Ok((
                Replicate {
                    delta_hat: est.delta_hat,
                    z,
                    rejected,
                },
                redraws,
                keep.then_some(ds),
            ))
        })
        .collect();

    let mut reps = Vec::with_capacity(opts.reps);
    let mut redraws = 0;
    let mut w = Welford::new();
    let mut abs_sum = 0.0;
    let mut hits = 0usize;
    let mut dump = dump;
    if let Some(out) = dump.as_deref_mut() {
        writeln!(out, "rep,i,arm,R,path,Ybar,n_teeth")?;
    }
    for (k, res) in results.into_iter().enumerate() {
        let (rep, rd, ds) = res?;
        redraws += rd;
        w.push(rep.delta_hat);
        abs_sum += rep.delta_hat.abs();
        hits += rep.rejected as usize;
        if let (Some(out), Some(ds)) = (dump.as_deref_mut(), ds) {
            write_clusters(out, k + 1, &ds)?;
        }
        reps.push(rep);
    }
    check_redraws(redraws, n * opts.reps as u64)?;
    let nr = opts.reps as f64;
    let power = hits as f64 / nr;
    Ok((
        PowerEstimate {
            power,
            reps: opts.reps,
            mean_delta_hat: w.mean(),
            mean_abs_delta_hat: abs_sum / nr,
            mcsd: w.variance().sqrt(),
            se_power: (power * (1.0 - power) / nr).sqrt(),
            redraws,
        },
        reps,
    ))
}

fn write_clusters(out: &mut dyn Write, rep: usize, ds: &TrialDataset) -> Result<()> {
    for (i, c) in ds.clusters.iter().enumerate() {
        writeln!(
            out,
            "{rep},{},{},{},{},{},{}",
            i + 1,
            c.arm + 1,
            c.responder as u8,
            c.path + 1,
            c.ybar,
            c.n_teeth
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Stage1Mode;
    use crate::dists::SkewTParams;
    use crate::missing::{prob_available, MissingnessParams};
    use crate::spatial::{AdjacencyGraph, CarModel};

    fn model() -> OutcomeModel {
        let car = CarModel::new(AdjacencyGraph::dental(28).unwrap(), 0.85, 0.975).unwrap();
        OutcomeModel::new(
            car,
            SkewTParams::normal(0.95).unwrap(),
            MissingnessParams::new(-1.0, 0.5, 1.0, 0.0).unwrap(),
        )
        .unwrap()
    }

    fn design(g: (f64, f64)) -> SmartDesign {
        let mut m = [0.0; 10];
        m[1] = 0.5;
        m[3] = 2.0;
        m[6] = 5.0;
        SmartDesign::periodontitis_default(&m, g, 28).unwrap()
    }

    #[test]
    fn all_responders_when_gamma_is_one() {
        let ds =
            simulate_trial(&design((1.0, 1.0)), &model(), 500, &mut rng::from_seed(1)).unwrap();
        assert!(ds
            .clusters
            .iter()
            .all(|c| c.responder && (c.path == 0 || c.path == 5)));
    }

    #[test]
    fn arm_frequency_and_availability() {
        let d = design((0.25, 0.5));
        let m = model();
        let n = 100_000;
        let ds = simulate_trial(&d, &m, n, &mut rng::from_seed(2)).unwrap();
        let pi1 = d.stage1_probs()[0];
        let f = ds.clusters.iter().filter(|c| c.arm == 0).count() as f64 / n as f64;
        assert!((f - pi1).abs() < 3.0 * (pi1 * (1.0 - pi1) / n as f64).sqrt());
        let frac: Welford = ds
            .clusters
            .iter()
            .map(|c| c.n_teeth as f64 / 28.0)
            .collect();
        let p = prob_available(&m.mp, m.sigma());
        assert!(
            (frac.mean() - p).abs() < 3.0 * frac.std_err(),
            "{} vs {p}",
            frac.mean()
        );
        assert!(ds.clusters.iter().all(|c| c.n_teeth >= 1));
    }

    #[test]
    fn weights_average_to_one() {
        let d = design((0.25, 0.5));
        let ds = simulate_trial(&d, &model(), 50_000, &mut rng::from_seed(3)).unwrap();
        for id in [1, 3, 5, 8] {
            let w: Welford = ipw_weights(&ds, &d, id).unwrap().into_iter().collect();
            assert!(
                (w.mean() - 1.0).abs() < 3.0 * w.std_err(),
                "regime {id}: {}",
                w.mean()
            );
        }
    }

    #[test]
    fn unit_weights_give_sample_mean() {
        let mu = vec![vec![1.0; 28], vec![3.0; 28]];
        let d = SmartDesign::from_tables(
            mu,
            &[vec![1.0, 1.0, 0.4]],
            &[vec![1.0, 1.0, 2.0, 1.0]],
            Stage1Mode::Equal,
        )
        .unwrap();
        let ds = simulate_trial(&d, &model(), 300, &mut rng::from_seed(4)).unwrap();
        let est = ipw_estimate(&ds, &d, &[1]).unwrap();
        let mean = ds.clusters.iter().map(|c| c.ybar).sum::<f64>() / 300.0;
        assert!((est.delta_hat - mean).abs() < 1e-12);
    }

    #[test]
    fn empty_regime_is_flagged() {
        let d = design((0.25, 0.5));
        let ds = TrialDataset {
            clusters: vec![ClusterRecord {
                arm: 1,
                responder: true,
                path: 5,
                ybar: 2.0,
                n_teeth: 20,
            }],
            redraws: 0,
        };
        let est = ipw_estimate(&ds, &d, &[2]).unwrap();
        assert_eq!(est.empty_regimes, vec![2]);
        assert_eq!(est.delta_hat, 0.0);
        assert!(ipw_estimate(&ds, &d, &[5])
            .unwrap()
            .empty_regimes
            .is_empty());
    }

    #[test]
    fn size_under_null_and_reproducibility() {
        let d = SmartDesign::periodontitis_default(&[1.0; 10], (0.25, 0.5), 28).unwrap();
        let m = model();
        let ids = [1, 5];
        let pm = crate::moments::estimate_design_paths(&d, &[0, 1, 5, 6], &m, 200_000, 11).unwrap();
        let a = crate::moments::RegimeStats::from_design(&d, 1, &pm).unwrap();
        let b = crate::moments::RegimeStats::from_design(&d, 5, &pm).unwrap();
        let e = crate::moments::effect_size(&a, Some(&b)).unwrap();
        let spec = TestSpec::new(TestKind::DistinctPair, 0.05, 0.2).unwrap();
        let opts = PowerOptions {
            reps: 1000,
            seed: 7,
            empirical_variance: false,
        };
        let p = mc_power(&d, &m, &spec, &ids, e.sigma2(), 100, &opts).unwrap();
        assert!(
            (p.power - 0.05).abs() < 3.0 * (0.05 * 0.95 / 1000.0f64).sqrt() + 0.005,
            "{}",
            p.power
        );
        let q = rng::with_workers(3, || {
            mc_power(&d, &m, &spec, &ids, e.sigma2(), 100, &opts).unwrap()
        });
        assert_eq!(p, q);
    }

    #[test]
    fn kind_mismatch_and_small_reps_rejected() {
        let d = design((0.25, 0.5));
        let m = model();
        let spec = TestSpec::new(TestKind::SharedPair, 0.05, 0.2).unwrap();
        let opts = PowerOptions {
            reps: 100,
            seed: 1,
            empirical_variance: false,
        };
        assert!(mc_power(&d, &m, &spec, &[1, 5], 1.0, 10, &opts).is_err());
        let opts = PowerOptions { reps: 10, ..opts };
        assert!(mc_power(&d, &m, &spec, &[1, 3], 1.0, 10, &opts).is_err());
    }

    #[test]
    fn dump_has_one_row_per_cluster() {
        let d = design((0.25, 0.5));
        let m = model();
        let spec = TestSpec::new(TestKind::SingleRegime, 0.05, 0.2).unwrap();
        let opts = PowerOptions {
            reps: 100,
            seed: 1,
            empirical_variance: true,
        };
        let mut buf = Vec::new();
        mc_power_detailed(&d, &m, &spec, &[1], 0.0, 12, &opts, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("rep,i,arm,R,path,Ybar,n_teeth"));
        assert_eq!(lines.count(), 1200);
    }
}
