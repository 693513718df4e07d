//! JSON run configuration and its resolution into library objects.
//!
//! Every block and scalar is optional; command-line flags are merged on top
//! of the file and remaining gaps take the documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::{periodontitis_tables, SmartDesign, Stage1Mode};
use crate::dists::{Dof, SkewTParams};
use crate::missing::{solve_missingness, MissingnessParams};
use crate::moments::OutcomeModel;
use crate::spatial::{AdjacencyGraph, CarModel};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const BUILTIN_DESIGN: &str = "periodontitis-default";
pub const DEFAULT_TEETH: usize = 28;
pub const DEFAULT_SEED: u64 = 20_190_801;

pub mod defaults {
    pub const TAU: f64 = 0.85;
    pub const RHO: f64 = 0.975;
    pub const SIGMA1: f64 = 0.95;
    pub const LAMBDA: f64 = 0.0;
    pub const SIGMA0: f64 = 1.0;
    pub const A0: f64 = -1.0;
    pub const B0: f64 = 0.5;
    pub const CUTOFF: f64 = 0.0;
    pub const ALPHA: f64 = 0.05;
    pub const BETA: f64 = 0.2;
    pub const NUM: usize = 1_000_000;
    pub const REPS: usize = 5000;
    pub const GAMMA: (f64, f64) = (0.25, 0.5);
    /// Per-path means of the built-in design (paths 2, 4 and 7 nonzero).
    pub const PATH_MEANS: [f64; 10] = [0.0, 0.5, 0.0, 2.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0];
}

/// Degrees of freedom as written in JSON: a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NuRepr", into = "NuRepr")]
pub struct Nu(pub Dof);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NuRepr {
    Num(f64),
    Text(String),
}

impl TryFrom<NuRepr> for Nu {
    type Error = String;
    fn try_from(r: NuRepr) -> std::result::Result<Self, String> {
        match r {
            NuRepr::Num(v) => Dof::new(v).map(Nu).map_err(|e| e.to_string()),
            NuRepr::Text(s) => parse_nu(&s).map(Nu).map_err(|e| e.to_string()),
        }
    }
}

impl From<Nu> for NuRepr {
    fn from(n: Nu) -> Self {
        match n.0 {
            Dof::Infinite => NuRepr::Text("inf".into()),
            Dof::Finite(v) => NuRepr::Num(v),
        }
    }
}

/// Parses `inf`/`Inf`/`infinity` or a positive number.
pub fn parse_nu(s: &str) -> Result<Dof> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" => Ok(Dof::Infinite),
        t => {
            let v: f64 = t.parse().map_err(|_| {
                Error::Config(format!("nu: expected a number or \"inf\", got {s:?}"))
            })?;
            Dof::new(v)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignBlock {
    /// Name of a built-in design; `mu`/`st1`/`dtr` then override parts of it.
    pub builtin: Option<String>,
    pub mu: Option<Vec<Vec<f64>>>,
    pub mu_csv: Option<PathBuf>,
    pub mu_scalar_per_path: Option<Vec<f64>>,
    pub teeth: Option<usize>,
    pub st1: Option<Vec<Vec<f64>>>,
    pub dtr: Option<Vec<Vec<f64>>>,
    /// Response rates per arm; overrides the third `st1` column.
    pub gamma: Option<Vec<f64>>,
    pub stage1_mode: Option<Stage1Mode>,
    pub pi1_literal: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphBlock {
    pub edge_list: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    pub sigma1: Option<f64>,
    pub lambda: Option<f64>,
    pub nu: Option<Nu>,
    pub sigma0: Option<f64>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
    pub p_i: Option<f64>,
    pub c_i: Option<f64>,
    pub cutoff: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestBlock {
    pub regimes: Option<Vec<usize>>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub power: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    pub num: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Option<u32>,
    #[serde(default)]
    pub design: DesignBlock,
    #[serde(default)]
    pub graph: GraphBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub test: TestBlock,
    #[serde(default)]
    pub mc: McBlock,
    /// Directory that relative file paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// How missingness was specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessInput {
    Direct { a0: f64, b0: f64 },
    Targets { p_i: f64, c_i: f64 },
}

/// Fully resolved inputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub design: SmartDesign,
    pub graph_source: String,
    pub model: OutcomeModel,
    pub missingness_input: MissingnessInput,
    pub regimes: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub num: usize,
    pub reps: usize,
    pub seed: u64,
    pub workers: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match cfg.schema {
            Some(SCHEMA_VERSION) | None => Ok(cfg),
            Some(v) => Err(Error::Config(format!(
                "unsupported schema version {v}; this build reads schema {SCHEMA_VERSION}"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Builds the design only.
    pub fn build_design(&self) -> Result<SmartDesign> {
        let d = &self.design;
        let forms = [
            d.mu.is_some(),
            d.mu_csv.is_some(),
            d.mu_scalar_per_path.is_some(),
        ];
        if forms.iter().filter(|&&f| f).count() > 1 {
            return Err(Error::Config(
                "design: give only one of mu, mu_csv and mu_scalar_per_path".into(),
            ));
        }
        let builtin = match d.builtin.as_deref() {
            None => {
                d.mu.is_none()
                    && d.mu_csv.is_none()
                    && d.mu_scalar_per_path.is_none()
                    && d.st1.is_none()
                    && d.dtr.is_none()
            }
            Some(BUILTIN_DESIGN) => true,
            Some(other) => {
                return Err(Error::Config(format!(
                    "design.builtin: unknown design {other:?}; available: {BUILTIN_DESIGN}"
                )))
            }
        };

        let mu: Vec<Vec<f64>> = if let Some(m) = &d.mu {
            m.clone()
        } else if let Some(p) = &d.mu_csv {
            read_mu_csv(&self.resolve_path(p))?
        } else {
            let teeth = d.teeth.unwrap_or(DEFAULT_TEETH);
            let scalars: Vec<f64> = match &d.mu_scalar_per_path {
                Some(s) => s.clone(),
                None if builtin => defaults::PATH_MEANS.to_vec(),
                None => {
                    return Err(Error::Config(
                        "design: mu, mu_csv or mu_scalar_per_path is required".into(),
                    ))
                }
            };
            scalars.iter().map(|&m| vec![m; teeth]).collect()
        };
        if let Some(t) = d.teeth {
            if mu.iter().any(|r| r.len() != t) {
                return Err(Error::Config(format!(
                    "design.teeth is {t} but mu rows have a different length"
                )));
            }
        }

        let (builtin_st1, builtin_dtr) = periodontitis_tables(defaults::GAMMA);
        let mut st1 = match (&d.st1, builtin) {
            (Some(s), _) => s.clone(),
            (None, true) => builtin_st1,
            (None, false) => return Err(Error::Config("design.st1 is required".into())),
        };
        if let Some(g) = &d.gamma {
            if g.len() != st1.len() {
                return Err(Error::Config(format!(
                    "design.gamma has {} entries for {} arms",
                    g.len(),
                    st1.len()
                )));
            }
            for (row, &gi) in st1.iter_mut().zip(g) {
                if row.len() >= 3 {
                    row[2] = gi;
                }
            }
        }
        let dtr = match (&d.dtr, builtin) {
            (Some(t), _) => t.clone(),
            (None, true) => builtin_dtr,
            (None, false) => return Err(Error::Config("design.dtr is required".into())),
        };
        let mut design =
            SmartDesign::from_tables(mu, &st1, &dtr, d.stage1_mode.unwrap_or_default())?;
        design.pi1_literal = d.pi1_literal.unwrap_or(false);
        Ok(design)
    }

    pub fn build_graph(&self, teeth: usize) -> Result<(AdjacencyGraph, String)> {
        match &self.graph.edge_list {
            Some(p) => {
                let p = self.resolve_path(p);
                let g = AdjacencyGraph::load_edge_list(&p, Some(teeth))?;
                Ok((g, format!("edge list {}", p.display())))
            }
            None => Ok((
                AdjacencyGraph::dental(teeth)?,
                format!("two-arch dental graph ({teeth} teeth)"),
            )),
        }
    }

    pub fn error_law(&self) -> Result<SkewTParams> {
        let m = &self.model;
        SkewTParams::new(
            0.0,
            m.sigma1.unwrap_or(defaults::SIGMA1),
            m.lambda.unwrap_or(defaults::LAMBDA),
            m.nu.map_or(Dof::Infinite, |n| n.0),
        )
    }

    pub fn missingness_input(&self) -> Result<MissingnessInput> {
        let m = &self.model;
        let direct = m.a0.is_some() || m.b0.is_some();
        let targets = m.p_i.is_some() || m.c_i.is_some();
        match (direct, targets) {
            (true, true) => Err(Error::Config(
                "model: give either a0/b0 or p_i/c_i, not both".into(),
            )),
            (false, true) => match (m.p_i, m.c_i) {
                (Some(p_i), Some(c_i)) => Ok(MissingnessInput::Targets { p_i, c_i }),
                _ => Err(Error::Config(
                    "model: p_i and c_i must be given together".into(),
                )),
            },
            _ => Ok(MissingnessInput::Direct {
                a0: m.a0.unwrap_or(defaults::A0),
                b0: m.b0.unwrap_or(defaults::B0),
            }),
        }
    }

    pub fn alpha_beta(&self) -> Result<(f64, f64)> {
        let t = &self.test;
        let alpha = t.alpha.unwrap_or(defaults::ALPHA);
        let beta = match (t.beta, t.power) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("test: give beta or power, not both".into()))
            }
            (Some(b), None) => b,
            (None, Some(p)) => 1.0 - p,
            (None, None) => defaults::BETA,
        };
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!(
                    "test.{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok((alpha, beta))
    }

    /// Seed precedence: explicit value, then `SMARTP_SEED`, then the default.
    pub fn seed(&self) -> Result<u64> {
        if let Some(s) = self.mc.seed {
            return Ok(s);
        }
        match std::env::var("SMARTP_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "SMARTP_SEED: expected an unsigned integer, got {v:?}"
                ))
            }),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    /// Resolves everything, solving for `(a₀, b₀)` when targets were given.
    pub fn resolve(&self) -> Result<Resolved> {
        let design = self.build_design()?;
        let (graph, graph_source) = self.build_graph(design.teeth)?;
        let m = &self.model;
        let car = CarModel::new(
            graph,
            m.tau.unwrap_or(defaults::TAU),
            m.rho.unwrap_or(defaults::RHO),
        )?;
        let st = self.error_law()?;
        let sigma0 = m.sigma0.unwrap_or(defaults::SIGMA0);
        let cutoff = m.cutoff.unwrap_or(defaults::CUTOFF);
        let input = self.missingness_input()?;
        let sigma = car.covariance()?;
        let mp = match input {
            MissingnessInput::Direct { a0, b0 } => MissingnessParams::new(a0, b0, sigma0, cutoff)?,
            MissingnessInput::Targets { p_i, c_i } => {
                solve_missingness(p_i, c_i, &sigma, &st, sigma0, cutoff)?
            }
        };
        let model = OutcomeModel::new(car, st, mp)?;

        let regimes = self.test.regimes.clone().unwrap_or_else(|| vec![1, 5]);
        if regimes.is_empty() || regimes.len() > 2 {
            return Err(Error::Config(format!(
                "test.regimes must list one or two regimes, got {}",
                regimes.len()
            )));
        }
        for &r in &regimes {
            design
                .regime(r)
                .map_err(|e| Error::Config(format!("test.regimes: {e}")))?;
        }
        let (alpha, beta) = self.alpha_beta()?;
        let num = self.mc.num.unwrap_or(defaults::NUM);
        if num < 2 {
            return Err(Error::Config(format!(
                "mc.num must be at least 2, got {num}"
            )));
        }
        Ok(Resolved {
            design,
            graph_source,
            model,
            missingness_input: input,
            regimes,
            alpha,
            beta,
            num,
            reps: self.mc.reps.unwrap_or(defaults::REPS),
            seed: self.seed()?,
            workers: self.mc.workers.unwrap_or(0),
        })
    }
}

/// Reads a headerless numeric CSV: rows are paths, columns are teeth.
pub fn read_mu_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    read_mu_csv_from_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_mu_csv_from_str(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "row {} column {}: {f:?} is not a number",
                        i + 1,
                        j + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config("matrix is empty".into()));
    }
    Ok(rows)
}
