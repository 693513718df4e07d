//! Two-stage SMART structure: stage-1 arms, treatment paths and regimes.
//!
//! Arms, paths and regimes are stored 0-based; every user-facing message and
//! table uses 1-based numbers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Arm {
    pub n_resp_options: usize,
    pub n_nonresp_options: usize,
    /// Response rate.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPath {
    pub arm: usize,
    pub responder: bool,
    /// Per-tooth mean.
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    /// User-facing regime number.
    pub id: usize,
    pub responder_path: usize,
    pub nonresp_path: usize,
    pub arm: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Mode {
    /// Weights chosen so every embedded regime gets the same expected size.
    #[default]
    BalancedRegime,
    /// Weights proportional to the larger of the two option counts.
    MaxRule,
    Equal,
}

impl fmt::Display for Stage1Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage1Mode::BalancedRegime => "balanced-regime",
            Stage1Mode::MaxRule => "max-rule",
            Stage1Mode::Equal => "equal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subject {
    Design,
    Arm(usize),
    Path(usize),
    Regime(usize),
}

/// One failed design invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: Subject,
    pub message: String,
}

impl Violation {
    fn new(subject: Subject, message: impl Into<String>) -> Self {
        Self {
            subject,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subject {
            Subject::Design => write!(f, "design: {}", self.message),
            Subject::Arm(a) => write!(f, "arm {}: {}", a + 1, self.message),
            Subject::Path(p) => write!(f, "path {}: {}", p + 1, self.message),
            Subject::Regime(id) => write!(f, "regime {id}: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartDesign {
    pub teeth: usize,
    pub arms: Vec<Stage1Arm>,
    pub paths: Vec<TreatmentPath>,
    pub regimes: Vec<Regime>,
    pub stage1_mode: Stage1Mode,
    /// Compatibility switch: under `BalancedRegime`, weight every arm after
    /// the first as if it had one option per response status.
    #[serde(default)]
    pub pi1_literal: bool,
}

/// Per-path probability and label vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTables {
    pub p_st1: Vec<f64>,
    pub p_st2: Vec<f64>,
    pub res: Vec<u8>,
    pub ga: Vec<f64>,
    pub initr: Vec<usize>,
}

/// Stage-1 and regime tables of the two-arm, ten-path periodontitis design.
pub fn periodontitis_tables(gamma: (f64, f64)) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let st1 = vec![vec![1.0, 4.0, gamma.0, 1.0], vec![1.0, 4.0, gamma.1, 2.0]];
    let dtr = (0..8)
        .map(|k| {
            let arm = k / 4;
            let rp = 5 * arm + 1;
            let np = 5 * arm + 2 + k % 4;
            vec![(k + 1) as f64, rp as f64, np as f64, (arm + 1) as f64]
        })
        .collect();
    (st1, dtr)
}

impl SmartDesign {
    /// Builds a design from the tabular layout: `mu` (paths × teeth), `st1`
    /// rows `[n_R, n_NR, γ]` with an optional fourth row-number column, and
    /// `dtr` rows `[regime, responder path, non-responder path, arm]`, all
    /// 1-based. Path arm and responder status are read off `dtr`.
    pub fn from_tables(
        mu: Vec<Vec<f64>>,
        st1: &[Vec<f64>],
        dtr: &[Vec<f64>],
        mode: Stage1Mode,
    ) -> Result<Self> {
        let mut v = Vec::new();
        let teeth = mu.first().map_or(0, Vec::len);

        let mut arms = Vec::with_capacity(st1.len());
        for (a, row) in st1.iter().enumerate() {
            if row.len() != 3 && row.len() != 4 {
                v.push(Violation::new(
                    Subject::Arm(a),
                    format!("st1 row needs 3 or 4 columns, got {}", row.len()),
                ));
                continue;
            }
            if row.len() == 4 && row[3] != (a + 1) as f64 {
                v.push(Violation::new(
                    Subject::Arm(a),
                    format!(
                        "st1 row-number column is {} but the row is {}",
                        row[3],
                        a + 1
                    ),
                ));
            }
            let mut count = |x: f64, what: &str| -> usize {
                if x.fract() == 0.0 && x >= 0.0 {
                    x as usize
                } else {
                    v.push(Violation::new(
                        Subject::Arm(a),
                        format!("{what} must be a whole number, got {x}"),
                    ));
                    0
                }
            };
            let n_r = count(row[0], "responder option count");
            let n_nr = count(row[1], "non-responder option count");
            arms.push(Stage1Arm {
                n_resp_options: n_r,
                n_nonresp_options: n_nr,
                gamma: row[2],
            });
        }

        let n_paths = mu.len();
        let mut assigned: Vec<Option<(usize, bool)>> = vec![None; n_paths];
        let mut regimes = Vec::with_capacity(dtr.len());
        for (k, row) in dtr.iter().enumerate() {
            if row.len() != 4 {
                v.push(Violation::new(
                    Subject::Design,
                    format!("dtr row {} needs 4 columns, got {}", k + 1, row.len()),
                ));
                continue;
            }
            let idx = |x: f64| -> Option<usize> {
                (x.fract() == 0.0 && x >= 1.0).then(|| x as usize - 1)
            };
            let id = match idx(row[0]) {
                Some(i) => i + 1,
                None => {
                    v.push(Violation::new(
                        Subject::Design,
                        format!(
                            "dtr row {}: regime number {} is not a positive integer",
                            k + 1,
                            row[0]
                        ),
                    ));
                    continue;
                }
            };
            let (Some(rp), Some(np), Some(arm)) = (idx(row[1]), idx(row[2]), idx(row[3])) else {
                v.push(Violation::new(
                    Subject::Regime(id),
                    "path and arm numbers must be positive integers",
                ));
                continue;
            };
            let mut ok = true;
            for (p, resp) in [(rp, true), (np, false)] {
                if p >= n_paths {
                    v.push(Violation::new(
                        Subject::Regime(id),
                        format!("path {} does not exist (mu has {n_paths} rows)", p + 1),
                    ));
                    ok = false;
                    continue;
                }
                match assigned[p] {
                    None => assigned[p] = Some((arm, resp)),
                    Some(prev) if prev == (arm, resp) => {}
                    Some((pa, pr)) => {
                        v.push(Violation::new(
                            Subject::Path(p),
                            format!(
                                "used as {} on arm {} by regime {id} but as {} on arm {} elsewhere",
                                label(resp),
                                arm + 1,
                                label(pr),
                                pa + 1
                            ),
                        ));
                        ok = false;
                    }
                }
            }
            if ok {
                regimes.push(Regime {
                    id,
                    responder_path: rp,
                    nonresp_path: np,
                    arm,
                });
            }
        }

        let mut paths = Vec::with_capacity(n_paths);
        for (p, row) in mu.into_iter().enumerate() {
            match assigned[p] {
                Some((arm, responder)) => paths.push(TreatmentPath {
                    arm,
                    responder,
                    mu: row,
                }),
                None => {
                    v.push(Violation::new(
                        Subject::Path(p),
                        "not used by any regime, so its arm and response status are unknown",
                    ));
                    paths.push(TreatmentPath {
                        arm: usize::MAX,
                        responder: false,
                        mu: row,
                    });
                }
            }
        }

        if !v.is_empty() {
            return Err(Error::InvalidDesign(v));
        }
        let d = Self {
            teeth,
            arms,
            paths,
            regimes,
            stage1_mode: mode,
            pi1_literal: false,
        };
        d.validate()?;
        Ok(d)
    }

    /// The two-arm, ten-path, eight-regime periodontitis design with
    /// per-path constant means.
    pub fn periodontitis_default(
        path_means: &[f64; 10],
        gamma: (f64, f64),
        teeth: usize,
    ) -> Result<Self> {
        let mu = path_means.iter().map(|&m| vec![m; teeth]).collect();
        let (st1, dtr) = periodontitis_tables(gamma);
        Self::from_tables(mu, &st1, &dtr, Stage1Mode::BalancedRegime)
    }

    /// Checks every structural invariant, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.arms.is_empty() {
            v.push(Violation::new(Subject::Design, "no stage-1 arms"));
        }
        if self.regimes.is_empty() {
            v.push(Violation::new(Subject::Design, "no regimes"));
        }
        if self.teeth == 0 {
            v.push(Violation::new(Subject::Design, "mean vectors are empty"));
        }
        for (a, arm) in self.arms.iter().enumerate() {
            if arm.n_resp_options < 1 || arm.n_nonresp_options < 1 {
                v.push(Violation::new(
                    Subject::Arm(a),
                    "option counts must be at least 1",
                ));
            }
            if !(0.0..=1.0).contains(&arm.gamma) {
                v.push(Violation::new(
                    Subject::Arm(a),
                    format!("response rate {} is outside [0, 1]", arm.gamma),
                ));
            }
        }
        for (p, path) in self.paths.iter().enumerate() {
            if path.arm >= self.arms.len() {
                v.push(Violation::new(
                    Subject::Path(p),
                    format!("arm {} does not exist", path.arm.wrapping_add(1)),
                ));
            }
            if path.mu.len() != self.teeth {
                v.push(Violation::new(
                    Subject::Path(p),
                    format!(
                        "mean vector has {} entries, expected {}",
                        path.mu.len(),
                        self.teeth
                    ),
                ));
            }
            if let Some(t) = path.mu.iter().position(|m| !m.is_finite()) {
                v.push(Violation::new(
                    Subject::Path(p),
                    format!("mean for tooth {} is not finite", t + 1),
                ));
            }
        }
        let mut reachable = vec![false; self.paths.len()];
        let mut seen_ids = std::collections::BTreeSet::new();
        for r in &self.regimes {
            let s = Subject::Regime(r.id);
            if !seen_ids.insert(r.id) {
                v.push(Violation::new(
                    s.clone(),
                    "regime number is used more than once",
                ));
            }
            if r.arm >= self.arms.len() {
                v.push(Violation::new(
                    s.clone(),
                    format!("arm {} does not exist", r.arm + 1),
                ));
            }
            for (p, want_resp) in [(r.responder_path, true), (r.nonresp_path, false)] {
                let Some(path) = self.paths.get(p) else {
                    v.push(Violation::new(
                        s.clone(),
                        format!("path {} does not exist", p + 1),
                    ));
                    continue;
                };
                reachable[p] = true;
                if path.responder != want_resp {
                    v.push(Violation::new(
                        s.clone(),
                        format!(
                            "{} path {} is a {} path",
                            label(want_resp),
                            p + 1,
                            label(path.responder)
                        ),
                    ));
                }
                if path.arm != r.arm {
                    v.push(Violation::new(
                        s.clone(),
                        format!(
                            "path {} belongs to arm {}, not arm {}",
                            p + 1,
                            path.arm.wrapping_add(1),
                            r.arm + 1
                        ),
                    ));
                }
            }
        }
        for (p, &ok) in reachable.iter().enumerate() {
            if !ok {
                v.push(Violation::new(
                    Subject::Path(p),
                    "not reachable from any regime",
                ));
            }
        }
        for (a, arm) in self.arms.iter().enumerate() {
            for (resp, expected) in [(true, arm.n_resp_options), (false, arm.n_nonresp_options)] {
                let found = self
                    .paths
                    .iter()
                    .filter(|p| p.arm == a && p.responder == resp)
                    .count();
                if found != expected {
                    v.push(Violation::new(
                        Subject::Arm(a),
                        format!(
                            "declares {expected} {} options but has {found} {} paths",
                            label(resp),
                            label(resp)
                        ),
                    ));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidDesign(v))
        }
    }

    pub fn regime(&self, id: usize) -> Result<&Regime> {
        self.regimes.iter().find(|r| r.id == id).ok_or_else(|| {
            Error::InvalidArgument(format!("regime {id} is not defined by the design"))
        })
    }

    /// Stage-1 randomization probability for each arm.
    pub fn stage1_probs(&self) -> Vec<f64> {
        let w: Vec<f64> = match self.stage1_mode {
            Stage1Mode::Equal => vec![1.0; self.arms.len()],
            Stage1Mode::MaxRule => self
                .arms
                .iter()
                .map(|a| a.n_resp_options.max(a.n_nonresp_options) as f64)
                .collect(),
            Stage1Mode::BalancedRegime => self
                .arms
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    if self.pi1_literal && i > 0 {
                        1.0
                    } else {
                        1.0 / (a.gamma / a.n_resp_options as f64
                            + (1.0 - a.gamma) / a.n_nonresp_options as f64)
                    }
                })
                .collect(),
        };
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Stage-2 randomization probability of a path.
    pub fn stage2_prob(&self, path: usize) -> Result<f64> {
        let p = self
            .paths
            .get(path)
            .ok_or_else(|| Error::InvalidArgument(format!("path {} does not exist", path + 1)))?;
        let arm = &self.arms[p.arm];
        let n = if p.responder {
            arm.n_resp_options
        } else {
            arm.n_nonresp_options
        };
        Ok(1.0 / n as f64)
    }

    pub fn path_tables(&self) -> PathTables {
        let pi1 = self.stage1_probs();
        PathTables {
            p_st1: self.paths.iter().map(|p| pi1[p.arm]).collect(),
            p_st2: (0..self.paths.len())
                .map(|i| self.stage2_prob(i).expect("index in range"))
                .collect(),
            res: self.paths.iter().map(|p| p.responder as u8).collect(),
            ga: self.paths.iter().map(|p| self.arms[p.arm].gamma).collect(),
            initr: self.paths.iter().map(|p| p.arm + 1).collect(),
        }
    }

    /// Paths of `arm` with the given response status, in path order.
    pub fn paths_of(&self, arm: usize, responder: bool) -> Vec<usize> {
        (0..self.paths.len())
            .filter(|&i| self.paths[i].arm == arm && self.paths[i].responder == responder)
            .collect()
    }
}

fn label(responder: bool) -> &'static str {
    if responder {
        "responder"
    } else {
        "non-responder"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_design() -> SmartDesign {
        let mut m = [0.0; 10];
        m[1] = 0.5;
        m[3] = 2.0;
        m[6] = 5.0;
        SmartDesign::periodontitis_default(&m, (0.25, 0.5), 28).unwrap()
    }

    fn violations(r: Result<SmartDesign>) -> Vec<Violation> {
        match r {
            Err(Error::InvalidDesign(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn default_design_is_valid() {
        let d = default_design();
        assert_eq!(d.paths.len(), 10);
        assert_eq!(d.regimes.len(), 8);
        assert!(d.validate().is_ok());
        assert_eq!(d.regime(5).unwrap().responder_path, 5);
        assert!(d.regime(9).is_err());
    }

    #[test]
    fn wrong_responder_status_is_reported() {
        let mut d = default_design();
        d.regimes[0].responder_path = 1;
        let v = violations(d.validate().map(|_| d.clone()));
        assert!(v
            .iter()
            .any(|x| x.subject == Subject::Regime(1) && x.message.contains("responder path 2")));
    }

    #[test]
    fn option_count_mismatch_is_reported() {
        let mu = vec![vec![0.0; 4]; 4];
        let st1 = [vec![1.0, 4.0, 0.3]];
        let dtr = [
            vec![1.0, 1.0, 2.0, 1.0],
            vec![2.0, 1.0, 3.0, 1.0],
            vec![3.0, 1.0, 4.0, 1.0],
        ];
        let v = violations(SmartDesign::from_tables(mu, &st1, &dtr, Stage1Mode::Equal));
        assert!(v.iter().any(|x| x.subject == Subject::Arm(0)
            && x.message.contains("4 non-responder options but has 3")));
    }

    #[test]
    fn conflicting_and_unused_paths() {
        let mu = vec![vec![0.0; 2]; 3];
        let st1 = [vec![1.0, 1.0, 0.5]];
        let dtr = [vec![1.0, 1.0, 2.0, 1.0], vec![2.0, 2.0, 1.0, 1.0]];
        let v = violations(SmartDesign::from_tables(mu, &st1, &dtr, Stage1Mode::Equal));
        assert!(v.iter().any(|x| x.subject == Subject::Path(0)));
        assert!(v.iter().any(|x| x.subject == Subject::Path(2)));
    }

    #[test]
    fn stage1_modes() {
        let mut d = default_design();
        d.stage1_mode = Stage1Mode::Equal;
        assert_eq!(d.stage1_probs(), vec![0.5, 0.5]);
        d.stage1_mode = Stage1Mode::MaxRule;
        assert_eq!(d.stage1_probs(), vec![0.5, 0.5]);
        d.stage1_mode = Stage1Mode::BalancedRegime;
        let p = d.stage1_probs();
        let w1 = 1.0 / 0.4375;
        let w2 = 1.0 / 0.625;
        assert!((p[0] - w1 / (w1 + w2)).abs() < 1e-15);
        assert!((p[0] - 0.588_235_294_117_647).abs() < 1e-12);
        d.pi1_literal = true;
        let p = d.stage1_probs();
        assert!((p[0] - w1 / (w1 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn stage2_and_tables() {
        let mut d = default_design();
        d.stage1_mode = Stage1Mode::Equal;
        let t = d.path_tables();
        assert_eq!(t.p_st1, vec![0.5; 10]);
        assert_eq!(
            t.p_st2,
            vec![1.0, 0.25, 0.25, 0.25, 0.25, 1.0, 0.25, 0.25, 0.25, 0.25]
        );
        assert_eq!(t.res, vec![1, 0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(t.ga, [vec![0.25; 5], vec![0.5; 5]].concat());
        assert_eq!(t.initr, [vec![1; 5], vec![2; 5]].concat());
        assert!(d.stage2_prob(10).is_err());

        let mu = vec![vec![0.0; 2]; 3];
        let st1 = [vec![1.0, 2.0, 0.5]];
        let dtr = [vec![1.0, 1.0, 2.0, 1.0], vec![2.0, 1.0, 3.0, 1.0]];
        let d = SmartDesign::from_tables(mu, &st1, &dtr, Stage1Mode::Equal).unwrap();
        assert_eq!(d.stage2_prob(2).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn stage1_probs_sum_to_one_and_balance(g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0, g3 in 0.0f64..=1.0,
                                               n in prop::collection::vec((1usize..5, 1usize..6), 3)) {
            let gammas = [g1, g2, g3];
            let mut d = default_design();
            d.arms = n.iter().zip(gammas).map(|(&(r, nr), g)| Stage1Arm { n_resp_options: r, n_nonresp_options: nr, gamma: g }).collect();
            for mode in [Stage1Mode::Equal, Stage1Mode::MaxRule, Stage1Mode::BalancedRegime] {
                d.stage1_mode = mode;
                let p = d.stage1_probs();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x > 0.0));
            }
            let p = d.stage1_probs();
            let alloc: Vec<f64> = d.arms.iter().zip(&p).map(|(a, pi)| {
                pi * (a.gamma / a.n_resp_options as f64 + (1.0 - a.gamma) / a.n_nonresp_options as f64)
            }).collect();
            for x in &alloc {
                prop_assert!((x - alloc[0]).abs() < 1e-12);
            }
        }
    }
}
