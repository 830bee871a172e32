//! Bootstrap and Monte Carlo experiments for the limit laws, and
//! Kolmogorov-Smirnov diagnostics.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::costs::{build_cost, check_plan_conditions, check_value_conditions, check_divergence_conditions};
use crate::costs::{CostModel, CostSpec, SampleMode, Verdict};
use crate::error::{Error, Result};
use crate::measures::{empirical_from_counts, DiscreteMeasure, IndexedSpace, MeasureSpec};
use crate::sensitivity::{self, LimitMode, LinearLimit};
use crate::sinkhorn::{self, exact_ot_small, SolverConfig};

/// Per-replication generator: the experiment seed selects the key and the
/// replication index selects the stream, so draws do not depend on scheduling.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Multinomial counts of `n` i.i.d. draws from `r`.
pub fn sample_counts(r: &DiscreteMeasure, n: usize, rng: &mut ChaCha20Rng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(r.weights()).map_err(|e| Error::Config(format!("cannot sample: {e}")))?;
    let mut counts = vec![0usize; r.len()];
    for _ in 0..n {
        counts[dist.sample(rng)] += 1;
    }
    Ok(counts)
}

/// `n` i.i.d. atom indices drawn from `r`.
pub fn sample_indices(r: &DiscreteMeasure, n: usize, seed: u64) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(r.weights()).map_err(|e| Error::Config(format!("cannot sample: {e}")))?;
    let mut rng = replication_rng(seed, u64::MAX);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

fn resample_counts(sample: &[usize], size: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let pick = Uniform::new(0, sample.len()).expect("nonempty sample");
    let mut counts = vec![0usize; size];
    for _ in 0..sample.len() {
        counts[sample[pick.sample(rng)]] += 1;
    }
    counts
}

fn bootstrap_generic<F>(
    sample: &[usize],
    x_space: &Arc<IndexedSpace>,
    b: usize,
    seed: u64,
    stat: F,
) -> Result<Vec<f64>>
where
    F: Fn(&DiscreteMeasure) -> Result<f64> + Sync,
{
    if b == 0 {
        return Err(Error::Config("bootstrap size B must be at least 1".into()));
    }
    let r_hat = crate::measures::empirical_measure(sample, x_space.clone())?;
    let center = stat(&r_hat)?;
    let rate = (sample.len() as f64).sqrt();
    (0..b as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(seed, rep);
            let counts = resample_counts(sample, x_space.size(), &mut rng);
            let r_star = empirical_from_counts(&counts, x_space.clone());
            Ok(rate * (stat(&r_star)? - center))
        })
        .collect()
}

/// Bootstrap draws `√n (EROT(r̂*, s) - EROT(r̂, s))`, where `r̂` is the
/// empirical measure of `sample` on `x_space`.
pub fn bootstrap_value(
    sample: &[usize],
    x_space: &Arc<IndexedSpace>,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    b: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = SolverConfig::default();
    bootstrap_generic(sample, x_space, b, seed, |r| {
        Ok(sinkhorn::solve(r, s, m, lambda, &cfg)?.value)
    })
}

/// Bootstrap draws of `√n (<f, π(r̂*, s)> - <f, π(r̂, s)>)`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_plan_functional(
    sample: &[usize],
    x_space: &Arc<IndexedSpace>,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    f: &DMatrix<f64>,
    b: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if f.shape() != (x_space.size(), s.len()) {
        return Err(Error::SpaceMismatch);
    }
    let cfg = SolverConfig::default();
    bootstrap_generic(sample, x_space, b, seed, |r| {
        Ok(f.dot(&sinkhorn::solve(r, s, m, lambda, &cfg)?.plan))
    })
}

/// Reference law for [`ks_statistic`].
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<'a> {
    /// `N(mean, var)`; a zero variance is the point mass at `mean`.
    Normal { mean: f64, var: f64 },
    Sample(&'a [f64]),
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Supremum distance between the empirical CDF of `draws` and the reference.
pub fn ks_statistic(draws: &[f64], reference: Reference<'_>) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptyInput);
    }
    let xs = sorted(draws);
    let n = xs.len() as f64;
    match reference {
        Reference::Normal { mean, var } => {
            let cdf: Box<dyn Fn(f64) -> f64> = if var > 0.0 {
                let nd = Normal::new(mean, var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
                Box::new(move |x| nd.cdf(x))
            } else {
                Box::new(move |x| if x >= mean { 1.0 } else { 0.0 })
            };
            let mut d: f64 = 0.0;
            let mut i = 0;
            while i < xs.len() {
                // handle ties as one jump of the empirical CDF
                let mut j = i;
                while j + 1 < xs.len() && xs[j + 1] == xs[i] {
                    j += 1;
                }
                let f = cdf(xs[i]);
                let below = if var > 0.0 { f } else if xs[i] > mean { 1.0 } else { 0.0 };
                d = d.max(((j + 1) as f64 / n - f).abs()).max((below - i as f64 / n).abs());
                i = j + 1;
            }
            Ok(d.clamp(0.0, 1.0))
        }
        Reference::Sample(other) => {
            if other.is_empty() {
                return Err(Error::EmptyInput);
            }
            let ys = sorted(other);
            let m = ys.len() as f64;
            let (mut i, mut j) = (0, 0);
            let mut d: f64 = 0.0;
            while i < xs.len() && j < ys.len() {
                let t = xs[i].min(ys[j]);
                while i < xs.len() && xs[i] <= t {
                    i += 1;
                }
                while j < ys.len() && ys[j] <= t {
                    j += 1;
                }
                d = d.max((i as f64 / n - j as f64 / m).abs());
            }
            Ok(d.clamp(0.0, 1.0))
        }
    }
}

/// `λ(n) = scale · n^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub scale: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    -0.6
}

impl LambdaSchedule {
    pub fn at(&self, n: usize) -> f64 {
        self.scale * (n as f64).powf(self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistic {
    ValueClt,
    SinkhornCostClt,
    DivergenceClt,
    PlanFunctionalClt { f: Vec<Vec<f64>> },
    /// Bootstrap of the value from one sample of size `n`.
    Bootstrap,
    VanishingLambda,
}

impl Statistic {
    pub fn name(&self) -> &'static str {
        match self {
            Statistic::ValueClt => "value_clt",
            Statistic::SinkhornCostClt => "sinkhorn_cost_clt",
            Statistic::DivergenceClt => "divergence_clt",
            Statistic::PlanFunctionalClt { .. } => "plan_functional_clt",
            Statistic::Bootstrap => "bootstrap",
            Statistic::VanishingLambda => "vanishing_lambda",
        }
    }
}

fn default_mode() -> SampleMode {
    SampleMode::OneSampleR
}

/// Ground truth, sampling scheme and statistic of a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub r: MeasureSpec,
    pub s: MeasureSpec,
    pub cost: CostSpec,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lambda_schedule: Option<LambdaSchedule>,
    /// Sample size from `r` (or from `s` in the one-sample-s mode).
    pub n: usize,
    /// Sample size from `s` in the two-sample mode.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_mode")]
    pub mode: SampleMode,
    pub replications: usize,
    pub statistic: Statistic,
    pub seed: u64,
    /// Sample sizes scanned by the vanishing-λ experiment; defaults to `[n]`.
    #[serde(default)]
    pub sample_sizes: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("sample size n must be at least 2".into()));
        }
        match (self.mode, self.m) {
            (SampleMode::TwoSample, None) => return Err(Error::Config("two-sample mode needs m".into())),
            (SampleMode::TwoSample, Some(m)) if m < 2 => {
                return Err(Error::Config("sample size m must be at least 2".into()))
            }
            _ => {}
        }
        if let Some(ns) = &self.sample_sizes {
            if ns.is_empty() || ns.iter().any(|&n| n < 2) {
                return Err(Error::Config("sample_sizes must be nonempty and at least 2".into()));
            }
        }
        match (self.lambda, self.lambda_schedule) {
            (_, Some(sch)) if !(sch.scale > 0.0) => Err(Error::Config("lambda_schedule.scale must be positive".into())),
            (Some(l), _) if !(l > 0.0 && l.is_finite()) => Err(Error::Config(format!("lambda={l} must be positive"))),
            (None, None) => Err(Error::Config("lambda or lambda_schedule is required".into())),
            _ => Ok(()),
        }
    }

    fn lambda_at(&self, n: usize) -> f64 {
        match (self.lambda_schedule, self.lambda) {
            (Some(s), _) => s.at(n),
            (None, Some(l)) => l,
            (None, None) => unreachable!("validated"),
        }
    }

    /// `m / (n + m)` in the two-sample mode.
    pub fn delta(&self) -> Option<f64> {
        match (self.mode, self.m) {
            (SampleMode::TwoSample, Some(m)) => Some(m as f64 / (self.n + m) as f64),
            _ => None,
        }
    }

    fn limit_mode(&self) -> LimitMode {
        match self.mode {
            SampleMode::OneSampleR => LimitMode::OneSampleR,
            SampleMode::OneSampleS => LimitMode::OneSampleS,
            SampleMode::TwoSample => LimitMode::TwoSample {
                delta: self.delta().expect("validated"),
            },
        }
    }

    /// Rate `√n`, or `√(nm/(n+m))` for two samples.
    fn rate(&self) -> f64 {
        match (self.mode, self.m) {
            (SampleMode::TwoSample, Some(m)) => ((self.n * m) as f64 / (self.n + m) as f64).sqrt(),
            _ => (self.n as f64).sqrt(),
        }
    }
}

/// One row of the vanishing-λ variance trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub n: usize,
    pub lambda: f64,
    /// Mean over replications of `Var_{r̂ₙ}[α^{λₙ}]`.
    pub plug_in_var: f64,
    /// `Var_r[α⁰]`.
    pub limit_var: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCReport {
    pub statistic: String,
    pub mode: SampleMode,
    pub n: usize,
    pub m: Option<usize>,
    pub lambda: f64,
    pub replications: usize,
    pub population_value: f64,
    pub target_sigma2: f64,
    pub ks_distance: f64,
    pub sample_mean: f64,
    pub sample_var: f64,
    pub condition_verdict: Option<Verdict>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_trace: Option<Vec<TracePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
    pub standardized_draws: Vec<f64>,
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

struct Truth {
    r: DiscreteMeasure,
    s: DiscreteMeasure,
    m: CostModel,
}

fn ground_truth(cfg: &ExperimentConfig, lambda: f64) -> Result<Truth> {
    let r = cfg.r.build()?;
    let s = cfg.s.build()?;
    let (m, _) = build_cost(&cfg.cost, r.space(), s.space(), lambda)?;
    Ok(Truth { r, s, m })
}

/// Runs `replications` independent draws of the statistic and compares their
/// law with the Gaussian limit whose variance comes from the plug-in formulas
/// at the ground truth.
pub fn mc_clt_experiment(cfg: &ExperimentConfig) -> Result<MCReport> {
    cfg.validate()?;
    match cfg.statistic {
        Statistic::VanishingLambda => return vanishing_lambda_experiment(cfg),
        Statistic::Bootstrap => return bootstrap_experiment(cfg),
        _ => {}
    }
    let start = Instant::now();
    let lambda = cfg.lambda_at(cfg.n);
    let Truth { r, s, m } = ground_truth(cfg, lambda)?;
    let solver = SolverConfig::default();
    let mode = cfg.limit_mode();
    let profile = m.profile(lambda);
    let mut warnings = Vec::new();

    let f_table = match &cfg.statistic {
        Statistic::PlanFunctionalClt { f } => Some(table(f, r.len(), s.len())?),
        Statistic::SinkhornCostClt => Some(m.cost.clone()),
        _ => None,
    };
    let conditions = match cfg.statistic {
        Statistic::ValueClt => check_value_conditions(&r, &s, &profile, cfg.mode),
        Statistic::DivergenceClt => check_divergence_conditions(&r, &s, &profile, cfg.mode),
        _ => check_plan_conditions(&r, &s, &profile, cfg.mode),
    };
    if conditions.verdict != Verdict::Pass {
        warnings.push(format!(
            "conditions for {} are {:?}: {}",
            conditions.theorem,
            conditions.verdict,
            conditions.reasons.join("; ")
        ));
    }

    let pop = sinkhorn::solve(&r, &s, &m, lambda, &solver)?;
    let (population_value, limit): (f64, LinearLimit) = match &cfg.statistic {
        Statistic::ValueClt => (pop.value, sensitivity::value_limit(&pop)),
        Statistic::DivergenceClt => (
            sinkhorn::sinkhorn_divergence(&r, &s, &m, lambda, &solver)?,
            sensitivity::divergence_limit(&r, &s, &m, lambda, &solver)?,
        ),
        _ => {
            let f = f_table.as_ref().expect("plan statistic");
            let ops = sensitivity::build_operators(&pop, &r, &s, &m)?;
            if let Some(w) = &ops.warning {
                warnings.push(w.clone());
            }
            (f.dot(&pop.plan), sensitivity::plan_functional_limit(&ops, f)?)
        }
    };
    let target_sigma2 = limit.variance(&r, &s, mode);

    let statistic = |rr: &DiscreteMeasure, ss: &DiscreteMeasure| -> Result<f64> {
        match &cfg.statistic {
            Statistic::ValueClt => Ok(sinkhorn::solve(rr, ss, &m, lambda, &solver)?.value),
            Statistic::DivergenceClt => sinkhorn::sinkhorn_divergence(rr, ss, &m, lambda, &solver),
            _ => Ok(f_table
                .as_ref()
                .expect("plan statistic")
                .dot(&sinkhorn::solve(rr, ss, &m, lambda, &solver)?.plan)),
        }
    };
    let rate = cfg.rate();
    let draws: Vec<f64> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(cfg.seed, rep);
            let (rr, ss) = draw_pair(cfg, &r, &s, &mut rng)?;
            Ok(rate * (statistic(&rr, &ss)? - population_value))
        })
        .collect::<Result<_>>()?;
    let ks_distance = ks_statistic(&draws, Reference::Normal { mean: 0.0, var: target_sigma2 })?;
    let (sample_mean, sample_var) = mean_var(&draws);
    Ok(MCReport {
        statistic: cfg.statistic.name().into(),
        mode: cfg.mode,
        n: cfg.n,
        m: cfg.m,
        lambda,
        replications: cfg.replications,
        population_value,
        target_sigma2,
        ks_distance,
        sample_mean,
        sample_var,
        condition_verdict: Some(conditions.verdict),
        warnings,
        variance_trace: None,
        runtime_seconds: Some(start.elapsed().as_secs_f64()),
        standardized_draws: draws,
    })
}

fn table(f: &[Vec<f64>], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if f.len() != rows || f.iter().any(|row| row.len() != cols) {
        return Err(Error::LengthMismatch {
            expected: rows * cols,
            got: f.iter().map(Vec::len).sum(),
        });
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| f[i][j]))
}

fn draw_pair(
    cfg: &ExperimentConfig,
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    rng: &mut ChaCha20Rng,
) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    let emp = |mu: &DiscreteMeasure, k: usize, rng: &mut ChaCha20Rng| -> Result<DiscreteMeasure> {
        Ok(empirical_from_counts(&sample_counts(mu, k, rng)?, mu.space().clone()))
    };
    Ok(match cfg.mode {
        SampleMode::OneSampleR => (emp(r, cfg.n, rng)?, s.clone()),
        SampleMode::OneSampleS => (r.clone(), emp(s, cfg.n, rng)?),
        SampleMode::TwoSample => {
            let rr = emp(r, cfg.n, rng)?;
            (rr, emp(s, cfg.m.expect("validated"), rng)?)
        }
    })
}

/// One sample of size `n` from `r`, then `replications` bootstrap draws of the
/// value, compared with the Gaussian limit at the ground truth.
fn bootstrap_experiment(cfg: &ExperimentConfig) -> Result<MCReport> {
    let start = Instant::now();
    if cfg.mode != SampleMode::OneSampleR {
        return Err(Error::Config("bootstrap experiments resample r only".into()));
    }
    let lambda = cfg.lambda_at(cfg.n);
    let Truth { r, s, m } = ground_truth(cfg, lambda)?;
    let solver = SolverConfig::default();
    let pop = sinkhorn::solve(&r, &s, &m, lambda, &solver)?;
    let target_sigma2 = sensitivity::value_variance(&pop, &r, &s, LimitMode::OneSampleR);
    let conditions = check_value_conditions(&r, &s, &m.profile(lambda), cfg.mode);
    let mut warnings = Vec::new();
    if conditions.verdict != Verdict::Pass {
        warnings.push(format!("conditions for {} are {:?}", conditions.theorem, conditions.verdict));
    }
    let sample = sample_indices(&r, cfg.n, cfg.seed)?;
    let draws = bootstrap_value(&sample, r.space(), &s, &m, lambda, cfg.replications, cfg.seed)?;
    let ks_distance = ks_statistic(&draws, Reference::Normal { mean: 0.0, var: target_sigma2 })?;
    let (sample_mean, sample_var) = mean_var(&draws);
    Ok(MCReport {
        statistic: cfg.statistic.name().into(),
        mode: cfg.mode,
        n: cfg.n,
        m: None,
        lambda,
        replications: cfg.replications,
        population_value: pop.value,
        target_sigma2,
        ks_distance,
        sample_mean,
        sample_var,
        condition_verdict: Some(conditions.verdict),
        warnings,
        variance_trace: None,
        runtime_seconds: Some(start.elapsed().as_secs_f64()),
        standardized_draws: draws,
    })
}

/// Scans `sample_sizes` with `λₙ` from the schedule. For each `n` the trace
/// records the mean over replications of `Var_{r̂ₙ}[α^{λₙ}]` against
/// `Var_r[α⁰]` from the exact potentials. Draws are
/// `√n (EROT^{λₙ}(r̂ₙ, s) - EROT^{λₙ}(r, s))` at the largest `n`.
pub fn vanishing_lambda_experiment(cfg: &ExperimentConfig) -> Result<MCReport> {
    cfg.validate()?;
    let start = Instant::now();
    if cfg.mode != SampleMode::OneSampleR {
        return Err(Error::Config("vanishing-lambda experiments sample r only".into()));
    }
    let schedule = cfg
        .lambda_schedule
        .ok_or_else(|| Error::Config("vanishing-lambda experiments need lambda_schedule".into()))?;
    let r = cfg.r.build()?;
    let s = cfg.s.build()?;
    let (m, _) = build_cost(&cfg.cost, r.space(), s.space(), schedule.at(cfg.n))?;
    let ot = exact_ot_small(&r, &s, &m)?;
    if !ot.unique_potentials {
        return Err(Error::NonUniquePotentials);
    }
    let limit_var = r.variance(&ot.alpha0);
    let solver = SolverConfig::default();
    let mut ns = cfg.sample_sizes.clone().unwrap_or_else(|| vec![cfg.n]);
    ns.sort_unstable();
    let mut trace = Vec::new();
    let mut last = (0.0, 0.0, Vec::new());
    for (k, &n) in ns.iter().enumerate() {
        let lambda = schedule.at(n);
        let pop = sinkhorn::solve(&r, &s, &m, lambda, &solver)?;
        let rate = (n as f64).sqrt();
        let seed = cfg.seed.wrapping_add(k as u64);
        let rows: Vec<(f64, f64)> = (0..cfg.replications as u64)
            .into_par_iter()
            .map(|rep| {
                let mut rng = replication_rng(seed, rep);
                let r_hat = empirical_from_counts(&sample_counts(&r, n, &mut rng)?, r.space().clone());
                let sol = sinkhorn::solve(&r_hat, &s, &m, lambda, &solver)?;
                Ok((r_hat.variance(&sol.alpha), rate * (sol.value - pop.value)))
            })
            .collect::<Result<_>>()?;
        let plug_in_var = rows.iter().map(|p| p.0).sum::<f64>() / rows.len() as f64;
        trace.push(TracePoint {
            n,
            lambda,
            plug_in_var,
            limit_var,
            abs_error: (plug_in_var - limit_var).abs(),
        });
        last = (lambda, pop.value, rows.into_iter().map(|p| p.1).collect());
    }
    let (lambda, population_value, draws) = last;
    let ks_distance = ks_statistic(&draws, Reference::Normal { mean: 0.0, var: limit_var })?;
    let (sample_mean, sample_var) = mean_var(&draws);
    Ok(MCReport {
        statistic: cfg.statistic.name().into(),
        mode: cfg.mode,
        n: *ns.last().expect("nonempty"),
        m: None,
        lambda,
        replications: cfg.replications,
        population_value,
        target_sigma2: limit_var,
        ks_distance,
        sample_mean,
        sample_var,
        condition_verdict: None,
        warnings: Vec::new(),
        variance_trace: Some(trace),
        runtime_seconds: Some(start.elapsed().as_secs_f64()),
        standardized_draws: draws,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// CSV with columns `replication,draw`.
pub fn write_draws_csv(path: &Path, draws: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "replication,draw").map_err(io)?;
    for (i, d) in draws.iter().enumerate() {
        writeln!(w, "{i},{d:.16e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Pairs `(theoretical, sample)` of quantiles against `N(0, sigma2)`, using
/// plotting positions `(i - 1/2) / n`.
pub fn qq_pairs(draws: &[f64], sigma2: f64) -> Vec<(f64, f64)> {
    let xs = sorted(draws);
    let n = xs.len() as f64;
    let std = Normal::standard();
    let sd = sigma2.max(0.0).sqrt();
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (sd * std.inverse_cdf((i as f64 + 0.5) / n), x))
        .collect()
}

pub fn write_qq_csv(path: &Path, draws: &[f64], sigma2: f64) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "theoretical,sample").map_err(io)?;
    for (t, x) in qq_pairs(draws, sigma2) {
        writeln!(w, "{t:.16e},{x:.16e}").map_err(io)?;
    }
    w.flush().map_err(io)
}
