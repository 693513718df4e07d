use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smartp::config::{self, parse_nu, DesignBlock, Nu, RunConfig, BUILTIN_DESIGN};
use smartp::design::Stage1Mode;
use smartp::report;
use smartp::{Error, Result};

const LOW_NUM_WARNING: usize = 10_000;

#[derive(Parser, Debug)]
#[command(
    name = "smartp",
    version,
    about = "Sample size and power for clustered two-stage SMART designs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample size for a regime or regime contrast.
    Samplesize(SamplesizeArgs),
    /// Monte Carlo power of the IPW Wald test.
    Power(PowerArgs),
    /// Solve for (a0, b0) from target availability and correlation.
    SolveMissing(SolveArgs),
    /// Print the design's paths, regimes and randomization probabilities.
    DescribeDesign(DescribeArgs),
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in design name or a JSON design document.
    #[arg(long, value_name = "NAME|FILE")]
    design: Option<String>,
    /// Tooth adjacency as a 1-based edge list.
    #[arg(long, value_name = "FILE")]
    edge_list: Option<PathBuf>,
    /// Response rates per stage-1 arm.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    gamma: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    stage1_mode: Option<Stage1ModeArg>,
    /// Weight every stage-1 arm after the first by 1 instead of its option count.
    #[arg(long)]
    pi1_literal: bool,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Degrees of freedom of the error law; a number or "inf".
    #[arg(long)]
    nu: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    sigma0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    a0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    b0: Option<f64>,
    #[arg(long = "p-i")]
    p_i: Option<f64>,
    #[arg(long = "c-i", allow_negative_numbers = true)]
    c_i: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    cutoff: Option<f64>,
    /// One regime, or two to compare (1-based).
    #[arg(long, value_delimiter = ',', num_args = 1..=2)]
    regime: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, conflicts_with = "power")]
    beta: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    /// Monte Carlo clusters per path for the moment estimates.
    #[arg(long)]
    num: Option<usize>,
    /// Seed; falls back to the config, then SMARTP_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum Stage1ModeArg {
    BalancedRegime,
    MaxRule,
    Equal,
}

impl From<Stage1ModeArg> for Stage1Mode {
    fn from(m: Stage1ModeArg) -> Self {
        match m {
            Stage1ModeArg::BalancedRegime => Stage1Mode::BalancedRegime,
            Stage1ModeArg::MaxRule => Stage1Mode::MaxRule,
            Stage1ModeArg::Equal => Stage1Mode::Equal,
        }
    }
}

#[derive(Args, Debug)]
struct SamplesizeArgs {
    #[command(flatten)]
    inputs: InputArgs,
    /// Skip simulation and apply the formula to this standardized effect.
    #[arg(long, allow_negative_numbers = true)]
    delta_std: Option<f64>,
    /// Write the full result as JSON ("-" for stdout).
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Write per-path moment estimates as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Write the tooth covariance matrix as CSV.
    #[arg(long, value_name = "FILE")]
    sigma_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PowerArgs {
    #[command(flatten)]
    inputs: InputArgs,
    /// Trial size; defaults to the computed sample size.
    #[arg(long)]
    n: Option<u64>,
    /// Simulated trials.
    #[arg(long)]
    reps: Option<usize>,
    /// Studentize with each trial's own variance estimate.
    #[arg(long)]
    empirical_variance: bool,
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Write every simulated cluster as CSV.
    #[arg(long, value_name = "FILE")]
    dump_trials: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    #[command(flatten)]
    inputs: InputArgs,
}

fn load_design_doc(path: &Path) -> Result<DesignBlock> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut d: DesignBlock = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let (Some(csv), Some(dir)) = (&d.mu_csv, path.parent()) {
        if csv.is_relative() {
            d.mu_csv = Some(dir.join(csv));
        }
    }
    Ok(d)
}

fn build_config(a: &InputArgs, reps: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.design {
        if d == BUILTIN_DESIGN {
            cfg.design = DesignBlock {
                builtin: Some(d.clone()),
                ..DesignBlock::default()
            };
        } else {
            let p = Path::new(d);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "--design: {d:?} is neither a built-in design ({BUILTIN_DESIGN}) nor an existing file"
                )));
            }
            cfg.design = load_design_doc(p)?;
        }
    }
    let d = &mut cfg.design;
    if a.gamma.is_some() {
        d.gamma = a.gamma.clone();
    }
    if let Some(m) = a.stage1_mode {
        d.stage1_mode = Some(m.into());
    }
    if a.pi1_literal {
        d.pi1_literal = Some(true);
    }
    if let Some(e) = &a.edge_list {
        // Flag paths are relative to the working directory, not the config.
        cfg.graph.edge_list = Some(std::path::absolute(e)?);
    }

    let m = &mut cfg.model;
    for (slot, v) in [
        (&mut m.tau, a.tau),
        (&mut m.rho, a.rho),
        (&mut m.sigma1, a.sigma1),
        (&mut m.lambda, a.lambda),
        (&mut m.sigma0, a.sigma0),
        (&mut m.cutoff, a.cutoff),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    if let Some(nu) = &a.nu {
        m.nu = Some(Nu(parse_nu(nu)?));
    }
    // A missingness form given on the command line replaces the config's.
    let flag_direct = a.a0.is_some() || a.b0.is_some();
    let flag_targets = a.p_i.is_some() || a.c_i.is_some();
    if flag_direct && !flag_targets {
        m.p_i = None;
        m.c_i = None;
    }
    if flag_targets && !flag_direct {
        m.a0 = None;
        m.b0 = None;
    }
    for (slot, v) in [
        (&mut m.a0, a.a0),
        (&mut m.b0, a.b0),
        (&mut m.p_i, a.p_i),
        (&mut m.c_i, a.c_i),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }

    let t = &mut cfg.test;
    if a.regime.is_some() {
        t.regimes = a.regime.clone();
    }
    if a.alpha.is_some() {
        t.alpha = a.alpha;
    }
    if a.beta.is_some() || a.power.is_some() {
        t.beta = a.beta;
        t.power = a.power;
    }
    let mc = &mut cfg.mc;
    for (slot, v) in [
        (&mut mc.num, a.num),
        (&mut mc.reps, reps),
        (&mut mc.workers, a.workers),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    if a.seed.is_some() {
        mc.seed = a.seed;
    }
    Ok(cfg)
}

fn resolve(a: &InputArgs, reps: Option<usize>) -> Result<config::Resolved> {
    let r = build_config(a, reps)?.resolve()?;
    if r.num < LOW_NUM_WARNING {
        eprintln!("warning: Num = {} is small; moment estimates will be noisy (use at least {LOW_NUM_WARNING})", r.num);
    }
    Ok(r)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

/// Prints `table` unless JSON goes to stdout; writes JSON where requested.
fn emit<T: serde::Serialize>(table: String, value: &T, json: Option<&Path>) -> Result<()> {
    match json {
        Some(p) if p == Path::new("-") => println!("{}", report::to_json(value)?),
        Some(p) => {
            print!("{table}");
            let mut w = create(p)?;
            writeln!(w, "{}", report::to_json(value)?)?;
            w.flush()?;
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Samplesize(a) => {
            if let Some(ds) = a.delta_std {
                let cfg = build_config(&a.inputs, None)?;
                let (alpha, beta) = cfg.alpha_beta()?;
                let s = report::samplesize_analytic(ds, alpha, beta)?;
                return emit(report::render_analytic(&s), &s, a.json.as_deref());
            }
            let r = resolve(&a.inputs, None)?;
            let s = report::samplesize(&r)?;
            if let Some(p) = &a.csv {
                let mut w = create(p)?;
                report::write_paths_csv(&mut w, &s)?;
            }
            if let Some(p) = &a.sigma_csv {
                let mut w = create(p)?;
                report::write_sigma_csv(&mut w, r.model.sigma())?;
            }
            emit(report::render_samplesize(&s), &s, a.json.as_deref())
        }
        Command::Power(a) => {
            let r = resolve(&a.inputs, a.reps)?;
            let mut dump = a.dump_trials.as_deref().map(create).transpose()?;
            let p = report::power(
                &r,
                a.n,
                a.empirical_variance,
                dump.as_mut().map(|w| w as &mut (dyn Write + Send)),
            )?;
            if let Some(w) = dump.as_mut() {
                w.flush()?;
            }
            emit(report::render_power(&p), &p, a.json.as_deref())
        }
        Command::SolveMissing(a) => {
            let r = resolve(&a.inputs, None)?;
            let m = report::solve_missing(&r)?;
            emit(report::render_missing(&m), &m, a.json.as_deref())
        }
        Command::DescribeDesign(a) => {
            let cfg = build_config(&a.inputs, None)?;
            let design = cfg.build_design()?;
            let (graph, source) = cfg.build_graph(design.teeth)?;
            print!(
                "{}",
                report::render_design(&design, &format!("{source}, {} edges", graph.edge_count()))
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
