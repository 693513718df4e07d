//! Result records, the end-to-end pipelines behind each command, and output
//! formatting (fixed-width tables, JSON and CSV).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::design::SmartDesign;
use crate::missing::{corr_y_m, max_attainable_corr, prob_available};
use crate::moments::{effect_size, estimate_design_paths, PathMoments, RegimeStats};
use crate::power::{required_n, required_n_standardized, TestKind, TestSpec};
use crate::rng;
use crate::simtrial::{mc_power_detailed, test_kind, PowerEstimate, PowerOptions};
use crate::spatial::SpdMatrix;
use crate::{Error, Result};

/// Output of `samplesize`. Variance components are on the `N×` scale;
/// regime and path numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeResult {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "Del")]
    pub del: f64,
    #[serde(rename = "Del_std")]
    pub del_std: f64,
    #[serde(rename = "sig.d1.sq")]
    pub sig_d1_sq: f64,
    #[serde(rename = "sig.d2.sq")]
    pub sig_d2_sq: f64,
    #[serde(rename = "sig.d1d2")]
    pub sig_d1d2: f64,
    #[serde(rename = "sig.e.sq")]
    pub sig_e_sq: f64,
    pub ybard1: f64,
    pub ybard2: f64,
    pub p_st1: Vec<f64>,
    pub p_st2: Vec<f64>,
    pub res: Vec<u8>,
    pub ga: Vec<f64>,
    pub initr: Vec<usize>,
    pub regimes: Vec<usize>,
    pub kind: TestKind,
    pub alpha: f64,
    pub beta: f64,
    pub a0: f64,
    pub b0: f64,
    pub p_i: f64,
    pub c_i: f64,
    pub paths: Vec<PathSummary>,
    #[serde(rename = "Num")]
    pub num: usize,
    pub seed: u64,
    pub redraws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub path: usize,
    pub arm: usize,
    pub responder: bool,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub n_samples: u64,
    pub redraws: u64,
}

/// Output of `samplesize --delta-std`: the formula alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSampleSize {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "Del_std")]
    pub del_std: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    #[serde(rename = "N")]
    pub n: u64,
    pub regimes: Vec<usize>,
    pub kind: TestKind,
    pub alpha: f64,
    /// Design-stage `σ²` used in the Wald statistic.
    pub sigma2: f64,
    #[serde(rename = "Del")]
    pub del: f64,
    pub analytic_power: f64,
    pub empirical_variance: bool,
    pub seed: u64,
    #[serde(flatten)]
    pub estimate: PowerEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSolution {
    pub a0: f64,
    pub b0: f64,
    pub sigma0: f64,
    pub cutoff: f64,
    pub p_i: f64,
    pub c_i: f64,
    pub c_bound: f64,
}

fn test_spec(r: &Resolved) -> Result<TestSpec> {
    TestSpec::new(test_kind(&r.design, &r.regimes)?, r.alpha, r.beta)
}

fn regime_paths(d: &SmartDesign, regimes: &[usize]) -> Result<Vec<usize>> {
    let mut paths = Vec::new();
    for &id in regimes {
        let g = d.regime(id)?;
        paths.extend([g.responder_path, g.nonresp_path]);
    }
    paths.sort_unstable();
    paths.dedup();
    Ok(paths)
}

fn summarize(d: &SmartDesign, pm: &BTreeMap<usize, PathMoments>) -> Vec<PathSummary> {
    pm.values()
        .map(|m| PathSummary {
            path: m.path + 1,
            arm: d.paths[m.path].arm + 1,
            responder: d.paths[m.path].responder,
            mean: m.mu,
            variance: m.sigma2,
            se_mean: m.se_mu,
            n_samples: m.n_samples,
            redraws: m.redraws,
        })
        .collect()
}

/// Estimates path moments for the paths the regimes use, then applies the
/// closed-form variance algebra and the sample-size formula.
pub fn samplesize(r: &Resolved) -> Result<SampleSizeResult> {
    let test = test_spec(r)?;
    let d = &r.design;
    let paths = regime_paths(d, &r.regimes)?;
    let pm = rng::with_workers(r.workers, || {
        estimate_design_paths(d, &paths, &r.model, r.num, r.seed)
    })?;
    let first = RegimeStats::from_design(d, r.regimes[0], &pm)?;
    let second = r
        .regimes
        .get(1)
        .map(|&id| RegimeStats::from_design(d, id, &pm))
        .transpose()?;
    let es = effect_size(&first, second.as_ref())?;
    let del_std = es.delta_std()?;
    let n = required_n(es.delta, es.sigma2(), test.alpha, test.beta)?;
    let sigma = r.model.sigma();
    let st = &r.model.st;
    let t = d.path_tables();
    Ok(SampleSizeResult {
        n,
        del: es.delta.abs(),
        del_std: del_std.abs(),
        sig_d1_sq: es.sig_d1_sq,
        sig_d2_sq: es.sig_d2_sq,
        sig_d1d2: es.sig_d1d2,
        sig_e_sq: es.sig_e_sq,
        ybard1: es.ybard1,
        ybard2: es.ybard2,
        p_st1: t.p_st1,
        p_st2: t.p_st2,
        res: t.res,
        ga: t.ga,
        initr: t.initr,
        regimes: r.regimes.clone(),
        kind: test.kind,
        alpha: test.alpha,
        beta: test.beta,
        a0: r.model.mp.a0,
        b0: r.model.mp.b0,
        p_i: prob_available(&r.model.mp, sigma),
        c_i: corr_y_m(&r.model.mp, sigma, st)?,
        redraws: pm.values().map(|m| m.redraws).sum(),
        paths: summarize(d, &pm),
        num: r.num,
        seed: r.seed,
    })
}

pub fn samplesize_analytic(delta_std: f64, alpha: f64, beta: f64) -> Result<AnalyticSampleSize> {
    Ok(AnalyticSampleSize {
        n: required_n_standardized(delta_std, alpha, beta)?,
        del_std: delta_std,
        alpha,
        beta,
    })
}

/// Monte Carlo power at `n`, or at the computed sample size when `n` is
/// `None`. The design-stage `σ²` always comes from the moment estimates.
pub fn power(
    r: &Resolved,
    n: Option<u64>,
    empirical_variance: bool,
    dump: Option<&mut (dyn Write + Send)>,
) -> Result<PowerResult> {
    let ss = samplesize(r)?;
    let n = n.unwrap_or(ss.n);
    let test = test_spec(r)?;
    let sigma2 = ss.sig_e_sq / 2.0;
    let opts = PowerOptions {
        reps: r.reps,
        seed: r.seed,
        empirical_variance,
    };
    let (estimate, _) = rng::with_workers(r.workers, || {
        mc_power_detailed(
            &r.design,
            &r.model,
            &test,
            &r.regimes,
            sigma2,
            n,
            &opts,
            dump.map(|w| w as &mut dyn Write),
        )
    })?;
    Ok(PowerResult {
        n,
        regimes: r.regimes.clone(),
        kind: test.kind,
        alpha: test.alpha,
        sigma2,
        del: ss.del,
        analytic_power: crate::power::analytic_power(ss.del, sigma2, n, test.alpha)?,
        empirical_variance,
        seed: r.seed,
        estimate,
    })
}

/// Solves for `(a₀, b₀)` when targets were given, otherwise reports the
/// availability and correlation implied by the given pair.
pub fn solve_missing(r: &Resolved) -> Result<MissingSolution> {
    let sigma = r.model.sigma();
    let st = &r.model.st;
    let mp = &r.model.mp;
    Ok(MissingSolution {
        a0: mp.a0,
        b0: mp.b0,
        sigma0: mp.sigma0,
        cutoff: mp.cutoff,
        p_i: prob_available(mp, sigma),
        c_i: corr_y_m(mp, sigma, st)?,
        c_bound: max_attainable_corr(sigma, st)?,
    })
}

/// `%g`-style formatting with `sig` significant digits.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sig = sig.max(1);
    let exp = x.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (9.999996 -> 10.0000).
    let rounded: f64 = format!("{:.*e}", sig - 1, x).parse().unwrap_or(x);
    let exp = if rounded != 0.0 {
        rounded.abs().log10().floor() as i32
    } else {
        exp
    };
    if exp < -5 || exp >= sig as i32 {
        let s = format!("{:.*e}", sig - 1, x);
        let (m, e) = s.split_once('e').unwrap_or((&s, "0"));
        let m = trim_zeros(m);
        format!("{m}e{e}")
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(" ")
}

fn table(rows: &[(&str, String)]) -> String {
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<w$}  {v}");
    }
    out
}

pub fn render_samplesize(s: &SampleSizeResult) -> String {
    let g = |x: f64| fmt_sig(x, 6);
    let mut out = table(&[
        ("N", s.n.to_string()),
        ("Del", g(s.del)),
        ("Del_std", g(s.del_std)),
        ("sig.d1.sq", g(s.sig_d1_sq)),
        ("sig.d2.sq", g(s.sig_d2_sq)),
        ("sig.d1d2", g(s.sig_d1d2)),
        ("sig.e.sq", g(s.sig_e_sq)),
        ("ybard1", g(s.ybard1)),
        ("ybard2", g(s.ybard2)),
        ("p_st1", join(&s.p_st1, |&x| g(x))),
        ("p_st2", join(&s.p_st2, |&x| g(x))),
        ("res", join(&s.res, |x| x.to_string())),
        ("ga", join(&s.ga, |&x| g(x))),
        ("initr", join(&s.initr, |x| x.to_string())),
        ("regimes", join(&s.regimes, |x| x.to_string())),
        ("alpha", g(s.alpha)),
        ("beta", g(s.beta)),
        ("a0", g(s.a0)),
        ("b0", g(s.b0)),
        ("p_i", g(s.p_i)),
        ("c_i", g(s.c_i)),
        ("Num", s.num.to_string()),
        ("seed", s.seed.to_string()),
    ]);
    out.push_str("\npath  arm  R  mean        variance\n");
    for p in &s.paths {
        let _ = writeln!(
            out,
            "{:<4}  {:<3}  {}  {:<10}  {}",
            p.path,
            p.arm,
            p.responder as u8,
            g(p.mean),
            g(p.variance)
        );
    }
    out
}

pub fn render_analytic(s: &AnalyticSampleSize) -> String {
    table(&[
        ("N", s.n.to_string()),
        ("Del_std", fmt_sig(s.del_std, 6)),
        ("alpha", fmt_sig(s.alpha, 6)),
        ("beta", fmt_sig(s.beta, 6)),
    ])
}

pub fn render_power(p: &PowerResult) -> String {
    let g = |x: f64| fmt_sig(x, 6);
    table(&[
        ("N", p.n.to_string()),
        ("regimes", join(&p.regimes, |x| x.to_string())),
        ("power", g(p.estimate.power)),
        ("se", g(p.estimate.se_power)),
        ("analytic", g(p.analytic_power)),
        ("Del", g(p.del)),
        ("mean_delta_hat", g(p.estimate.mean_delta_hat)),
        ("mean_abs_delta_hat", g(p.estimate.mean_abs_delta_hat)),
        ("mcsd", g(p.estimate.mcsd)),
        ("reps", p.estimate.reps.to_string()),
        ("seed", p.seed.to_string()),
    ])
}

pub fn render_missing(m: &MissingSolution) -> String {
    let g = |x: f64| fmt_sig(x, 6);
    table(&[
        ("a0", g(m.a0)),
        ("b0", g(m.b0)),
        ("sigma0", g(m.sigma0)),
        ("cutoff", g(m.cutoff)),
        ("p_i", g(m.p_i)),
        ("c_i", g(m.c_i)),
        ("c_bound", g(m.c_bound)),
    ])
}

/// Human-readable listing of arms, paths, regimes and probabilities.
pub fn render_design(d: &SmartDesign, graph_source: &str) -> String {
    let p1 = d.stage1_probs();
    let mut out = String::new();
    let _ = writeln!(out, "teeth per cluster: {}", d.teeth);
    let _ = writeln!(out, "graph: {graph_source}");
    let _ = writeln!(
        out,
        "stage-1 mode: {}{}",
        d.stage1_mode,
        if d.pi1_literal { " (literal pi1)" } else { "" }
    );
    let _ = writeln!(out, "\narm  pi1       gamma     R options  NR options");
    for (k, a) in d.arms.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<3}  {:<8}  {:<8}  {:<9}  {}",
            k + 1,
            fmt_sig(p1[k], 6),
            fmt_sig(a.gamma, 6),
            a.n_resp_options,
            a.n_nonresp_options
        );
    }
    let _ = writeln!(out, "\n{} paths", d.paths.len());
    let _ = writeln!(out, "path  arm  R  pi2       mean mu");
    for (i, p) in d.paths.iter().enumerate() {
        let pi2 = d
            .stage2_prob(i)
            .map(|v| fmt_sig(v, 6))
            .unwrap_or_else(|_| "-".into());
        let mean = p.mu.iter().sum::<f64>() / p.mu.len().max(1) as f64;
        let _ = writeln!(
            out,
            "{:<4}  {:<3}  {}  {:<8}  {}",
            i + 1,
            p.arm + 1,
            p.responder as u8,
            pi2,
            fmt_sig(mean, 6)
        );
    }
    let _ = writeln!(out, "\n{} regimes", d.regimes.len());
    let _ = writeln!(out, "regime  arm  R path  NR path");
    for g in &d.regimes {
        let _ = writeln!(
            out,
            "{:<6}  {:<3}  {:<6}  {}",
            g.id,
            g.arm + 1,
            g.responder_path + 1,
            g.nonresp_path + 1
        );
    }
    out
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.into()))
}

/// Per-path moment table as RFC-4180 CSV.
pub fn write_paths_csv<W: Write>(w: W, s: &SampleSizeResult) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in &s.paths {
        wr.serialize(p).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Tooth covariance matrix as headerless CSV, one row per tooth.
pub fn write_sigma_csv<W: Write>(w: W, sigma: &SpdMatrix) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let n = sigma.dim();
    for i in 0..n {
        wr.write_record((0..n).map(|j| format!("{:?}", sigma.get(i, j))))
            .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
