//! Command line interface.
//!
//! Exit codes: 0 on success, 2 on validation or input errors (with a JSON error
//! object on stderr), 3 when the solver does not converge. Every flag can also
//! be set through an `EROT_`-prefixed environment variable; the flag wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::costs::{self, build_cost, CostModel, CostSpec, SampleMode};
use crate::error::{Error, Result};
use crate::measures::{load_measure, DiscreteMeasure, SignedVector};
use crate::resampling::{self, ExperimentConfig, Statistic};
use crate::sensitivity;
use crate::sinkhorn::{self, Normalization, SolverConfig};

#[derive(Debug, Parser, Serialize)]
#[command(name = "erot", version, about = "Entropic optimal transport toolkit")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "EROT_THREADS")]
    #[serde(skip)]
    threads: Option<usize>,
    /// Seed for stochastic subcommands.
    #[arg(long, global = true, env = "EROT_SEED")]
    seed: Option<u64>,
    /// Include wall-clock runtimes in reports.
    #[arg(long, global = true, env = "EROT_TIMING")]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Solve the entropic problem and write potentials, plan and value.
    Solve(SolveArgs),
    /// Sinkhorn divergence of two measures on a common space.
    Divergence(ProblemArgs),
    /// Check the potential and plan bounds at the solution.
    Bounds(ProblemArgs),
    /// Evaluate the summability conditions of the limit theorems.
    CheckConditions(ConditionArgs),
    /// Plug-in limit variances.
    Variance(VarianceArgs),
    /// Limit covariance of plan functionals.
    PlanCov(PlanCovArgs),
    /// Compare analytic derivatives with finite differences.
    DerivativeCheck(DerivativeArgs),
    /// Bootstrap the value from one sample.
    Bootstrap(ExperimentArgs),
    /// Monte Carlo check of a limit law.
    McClt(ExperimentArgs),
    /// Vanishing regularisation experiment.
    VanishingLambda(ExperimentArgs),
    /// Exact optimal transport for small instances.
    OtExact(OtExactArgs),
}

#[derive(Debug, Args, Serialize)]
struct Inputs {
    /// Measure r (JSON or CSV).
    #[arg(long, env = "EROT_R")]
    r: PathBuf,
    /// Measure s (JSON or CSV).
    #[arg(long, env = "EROT_S")]
    s: PathBuf,
    /// Cost specification (JSON).
    #[arg(long, env = "EROT_COST")]
    cost: PathBuf,
    /// Output file.
    #[arg(long, env = "EROT_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ProblemArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: Inputs,
    #[arg(long, env = "EROT_LAMBDA")]
    lambda: f64,
    #[arg(long, env = "EROT_TOL", default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, env = "EROT_MAX_ITER", default_value_t = 100_000)]
    max_iter: usize,
}

impl ProblemArgs {
    fn solver(&self) -> Result<SolverConfig> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol={} must be positive", self.tol)));
        }
        Ok(SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum NormArg {
    Balanced,
    AnchoredAtY1,
}

#[derive(Debug, Args, Serialize)]
struct SolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    problem: ProblemArgs,
    #[arg(long, env = "EROT_NORMALIZATION", value_enum, default_value = "balanced")]
    normalization: NormArg,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TheoremArg {
    Value,
    Plan,
    Divergence,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    OneSampleR,
    OneSampleS,
    TwoSample,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OneSampleR => SampleMode::OneSampleR,
            ModeArg::OneSampleS => SampleMode::OneSampleS,
            ModeArg::TwoSample => SampleMode::TwoSample,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct ConditionArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: Inputs,
    #[arg(long, env = "EROT_LAMBDA")]
    lambda: f64,
    #[arg(long, env = "EROT_THEOREM", value_enum)]
    theorem: TheoremArg,
    #[arg(long, env = "EROT_MODE", value_enum, default_value = "one-sample-r")]
    mode: ModeArg,
}

#[derive(Debug, Args, Serialize)]
struct VarianceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    problem: ProblemArgs,
    /// Limit of m/(n+m) for the two-sample variances.
    #[arg(long, env = "EROT_DELTA")]
    delta: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct PlanCovArgs {
    #[command(flatten)]
    #[serde(flatten)]
    variance: VarianceArgs,
    /// JSON list of tables f_k (rows over X, columns over Y); the cost is used
    /// when omitted.
    #[arg(long, env = "EROT_FUNCTIONS")]
    functions: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DerivativeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: Inputs,
    #[arg(long, env = "EROT_LAMBDA")]
    lambda: f64,
    /// Direction on X as a JSON array summing to zero; random when omitted.
    #[arg(long, env = "EROT_HX")]
    hx: Option<PathBuf>,
    /// Direction on Y as a JSON array summing to zero; random when omitted.
    #[arg(long, env = "EROT_HY")]
    hy: Option<PathBuf>,
    #[arg(long, env = "EROT_STEPS", value_delimiter = ',', default_value = "1e-2,1e-3,1e-4")]
    steps: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    /// Experiment configuration (JSON).
    #[arg(long, env = "EROT_CONFIG")]
    config: PathBuf,
    /// Report file; draws and QQ pairs go next to it as `.draws.csv` and `.qq.csv`.
    #[arg(long, env = "EROT_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct OtExactArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: Inputs,
    /// Regularisation levels for the vanishing-gap table.
    #[arg(long, env = "EROT_LAMBDAS", value_delimiter = ',')]
    lambdas: Vec<f64>,
}

/// Record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub resolved_config: serde_json::Value,
    pub input_digests: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub seed_note: String,
    pub artifacts: Vec<String>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn digest(path: &Path) -> Result<(String, String)> {
    let bytes = read(path)?;
    Ok((path.display().to_string(), hex::encode(Sha256::digest(&bytes))))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_cost(path: &Path) -> Result<CostSpec> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::Parse(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::Parse(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

struct Problem {
    r: DiscreteMeasure,
    s: DiscreteMeasure,
    m: CostModel,
}

fn load_problem(inputs: &Inputs, lambda: f64) -> Result<Problem> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda={lambda} must be positive and finite")));
    }
    let r = load_measure(&inputs.r)?;
    let s = load_measure(&inputs.s)?;
    let (m, _) = build_cost(&load_cost(&inputs.cost)?, r.space(), s.space(), lambda)?;
    Ok(Problem { r, s, m })
}

struct Outcome {
    artifacts: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Solve(a) => {
            let p = load_problem(&a.problem.inputs, a.problem.lambda)?;
            let mut cfg = a.problem.solver()?;
            cfg.normalization = match a.normalization {
                NormArg::Balanced => Normalization::Balanced,
                NormArg::AnchoredAtY1 => Normalization::AnchoredAtY1,
            };
            let sol = sinkhorn::solve(&p.r, &p.s, &p.m, a.problem.lambda, &cfg)?;
            write_json(&a.problem.inputs.out, &sol)?;
            Ok(deterministic(&a.problem.inputs))
        }
        Command::Divergence(a) => {
            let p = load_problem(&a.inputs, a.lambda)?;
            let cfg = a.solver()?;
            let d = sinkhorn::sinkhorn_divergence(&p.r, &p.s, &p.m, a.lambda, &cfg)?;
            let rs = sinkhorn::solve(&p.r, &p.s, &p.m, a.lambda, &cfg)?.value;
            let rr = sinkhorn::solve(&p.r, &p.r, &p.m, a.lambda, &cfg)?.value;
            let ss = sinkhorn::solve(&p.s, &p.s, &p.m, a.lambda, &cfg)?.value;
            write_json(
                &a.inputs.out,
                &json!({"lambda": a.lambda, "divergence": d, "erot_rs": rs, "erot_rr": rr, "erot_ss": ss}),
            )?;
            Ok(deterministic(&a.inputs))
        }
        Command::Bounds(a) => {
            let p = load_problem(&a.inputs, a.lambda)?;
            let sol = sinkhorn::solve(&p.r, &p.s, &p.m, a.lambda, &a.solver()?)?;
            let rep = sinkhorn::verify_bounds(&sol, &p.m, &p.r, &p.s);
            write_json(&a.inputs.out, &json!({"lambda": a.lambda, "holds": rep.holds(1e-7), "report": rep}))?;
            Ok(deterministic(&a.inputs))
        }
        Command::CheckConditions(a) => {
            let p = load_problem(&a.inputs, a.lambda)?;
            let profile = p.m.profile(a.lambda);
            let mode = a.mode.into();
            let rep = match a.theorem {
                TheoremArg::Value => costs::check_value_conditions(&p.r, &p.s, &profile, mode),
                TheoremArg::Plan => costs::check_plan_conditions(&p.r, &p.s, &profile, mode),
                TheoremArg::Divergence => costs::check_divergence_conditions(&p.r, &p.s, &profile, mode),
            };
            write_json(&a.inputs.out, &rep)?;
            Ok(deterministic(&a.inputs))
        }
        Command::Variance(a) => {
            let out = &a.problem.inputs.out;
            let p = load_problem(&a.problem.inputs, a.problem.lambda)?;
            let rep = sensitivity::covariance_report(&p.r, &p.s, &p.m, a.problem.lambda, a.delta, &[], &a.problem.solver()?)?;
            write_json(out, &rep)?;
            Ok(deterministic(&a.problem.inputs))
        }
        Command::PlanCov(a) => {
            let v = &a.variance;
            let p = load_problem(&v.problem.inputs, v.problem.lambda)?;
            let fns = match &a.functions {
                Some(path) => {
                    let raw: Vec<Vec<Vec<f64>>> = load_json(path)?;
                    raw.iter()
                        .map(|t| tables(t, p.r.len(), p.s.len()))
                        .collect::<Result<Vec<_>>>()?
                }
                None => vec![p.m.cost.clone()],
            };
            let rep = sensitivity::covariance_report(&p.r, &p.s, &p.m, v.problem.lambda, v.delta, &fns, &v.problem.solver()?)?;
            write_json(&v.problem.inputs.out, &rep)?;
            let mut o = deterministic(&v.problem.inputs);
            o.inputs.extend(a.functions.clone());
            Ok(o)
        }
        Command::DerivativeCheck(a) => {
            let p = load_problem(&a.inputs, a.lambda)?;
            let mut rng = resampling::replication_rng(seed, 0);
            let mut direction = |path: &Option<PathBuf>, mu: &DiscreteMeasure| -> Result<SignedVector> {
                let v: Vec<f64> = match path {
                    Some(path) => load_json(path)?,
                    None => {
                        let q: Vec<f64> = (0..mu.len()).map(|_| rng.random::<f64>() + 0.01).collect();
                        let t: f64 = q.iter().sum();
                        q.iter().zip(mu.weights()).map(|(a, b)| a / t - b).collect()
                    }
                };
                SignedVector::tangent(mu.space().clone(), v)
            };
            let hx = direction(&a.hx, &p.r)?;
            let hy = direction(&a.hy, &p.s)?;
            let rep = sensitivity::finite_difference_check(&p.r, &p.s, &p.m, a.lambda, &hx, &hy, &a.steps)?;
            let pass = rep.plan_slope >= 0.9 && rep.value_slope >= 0.9 && rep.marginal_error <= 1e-9;
            write_json(&a.inputs.out, &json!({"lambda": a.lambda, "pass": pass, "report": rep}))?;
            let mut o = deterministic(&a.inputs);
            o.inputs.extend(a.hx.clone());
            o.inputs.extend(a.hy.clone());
            o.seed = (a.hx.is_none() || a.hy.is_none()).then_some(seed);
            Ok(o)
        }
        Command::Bootstrap(a) | Command::McClt(a) | Command::VanishingLambda(a) => {
            let mut cfg: ExperimentConfig = load_json(&a.config)?;
            if let Some(sd) = cli.seed {
                cfg.seed = sd;
            }
            match &cli.command {
                Command::Bootstrap(_) => cfg.statistic = Statistic::Bootstrap,
                Command::VanishingLambda(_) => cfg.statistic = Statistic::VanishingLambda,
                _ => {}
            }
            let mut rep = resampling::mc_clt_experiment(&cfg)?;
            if !cli.timing {
                rep.runtime_seconds = None;
            }
            let draws = sibling(&a.out, ".draws.csv");
            let qq = sibling(&a.out, ".qq.csv");
            write_json(&a.out, &rep)?;
            resampling::write_draws_csv(&draws, &rep.standardized_draws)?;
            resampling::write_qq_csv(&qq, &rep.standardized_draws, rep.target_sigma2)?;
            Ok(Outcome {
                artifacts: vec![a.out.clone(), draws, qq],
                inputs: vec![a.config.clone()],
                seed: Some(cfg.seed),
            })
        }
        Command::OtExact(a) => {
            let r = load_measure(&a.inputs.r)?;
            let s = load_measure(&a.inputs.s)?;
            let lam0 = a.lambdas.first().copied().unwrap_or(1.0);
            let (m, _) = build_cost(&load_cost(&a.inputs.cost)?, r.space(), s.space(), lam0)?;
            let ot = sinkhorn::exact_ot_small(&r, &s, &m)?;
            let gap = if a.lambdas.is_empty() {
                None
            } else {
                Some(sinkhorn::vanishing_reg_gap(&r, &s, &m, &a.lambdas, &SolverConfig::default())?)
            };
            let subsets = sinkhorn::potentials_unique_by_subsets(&r, &s, 1e-12);
            write_json(&a.inputs.out, &json!({"solution": ot, "unique_by_subsets": subsets, "gap": gap}))?;
            Ok(deterministic(&a.inputs))
        }
    }
}

fn tables(t: &[Vec<f64>], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if t.len() != rows || t.iter().any(|r| r.len() != cols) {
        return Err(Error::LengthMismatch {
            expected: rows * cols,
            got: t.iter().map(Vec::len).sum(),
        });
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| t[i][j]))
}

fn deterministic(inputs: &Inputs) -> Outcome {
    Outcome {
        artifacts: vec![inputs.out.clone()],
        inputs: vec![inputs.r.clone(), inputs.s.clone(), inputs.cost.clone()],
        seed: None,
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Solve(_) => "solve",
        Command::Divergence(_) => "divergence",
        Command::Bounds(_) => "bounds",
        Command::CheckConditions(_) => "check-conditions",
        Command::Variance(_) => "variance",
        Command::PlanCov(_) => "plan-cov",
        Command::DerivativeCheck(_) => "derivative-check",
        Command::Bootstrap(_) => "bootstrap",
        Command::McClt(_) => "mc-clt",
        Command::VanishingLambda(_) => "vanishing-lambda",
        Command::OtExact(_) => "ot-exact",
    }
}

fn run_cli(cli: &Cli) -> Result<()> {
    let outcome = execute(cli)?;
    let primary = outcome.artifacts[0].clone();
    let manifest = RunManifest {
        subcommand: subcommand_name(&cli.command).into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        resolved_config: serde_json::to_value(cli).map_err(|e| Error::Parse(e.to_string()))?,
        input_digests: outcome.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        seed: outcome.seed,
        seed_note: if outcome.seed.is_some() {
            "seed drives all random draws".into()
        } else {
            "deterministic subcommand; seed ignored".into()
        },
        artifacts: outcome.artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&sibling(&primary, ".manifest.json"), &manifest)
}

fn error_json(kind: &str, message: &str, extra: serde_json::Value) -> String {
    let mut v = json!({"error": kind, "message": message});
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v.to_string()
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        2
                    } else {
                        0
                    }
                }
                kind => {
                    let name = if kind == ErrorKind::InvalidSubcommand {
                        "UnknownSubcommand"
                    } else {
                        "ConfigParse"
                    };
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("{}", error_json(name, first, json!({})));
                    2
                }
            };
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", error_json("ConfigParse", &e.to_string(), json!({})));
            return 2;
        }
    };
    match pool.install(|| run_cli(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            let extra = match &e {
                Error::NonConvergence { iterations, residual } => json!({"iterations": iterations, "residual": residual}),
                _ => json!({}),
            };
            eprintln!("{}", error_json(e.kind(), &e.to_string(), extra));
            exit_code(&e)
        }
    }
}
