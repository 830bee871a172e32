//! Derivatives of the entropic plan and value, and the plug-in limit variances.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{CostModel, WeightProfile};
use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, SignedVector};
use crate::sinkhorn::{self, Normalization, SinkhornSolution, SolverConfig};

/// Tolerance on `Σ h` for tangent vectors.
pub const TANGENT_TOL: f64 = 1e-10;
/// Contraction norms above this value trigger a warning.
pub const CONTRACTION_WARN: f64 = 0.999;

/// Which marginals are estimated; `delta` is the limit of `m / (n + m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LimitMode {
    OneSampleR,
    OneSampleS,
    TwoSample { delta: f64 },
}

impl LimitMode {
    /// Weights `(w_r, w_s)` of the two variance contributions.
    pub fn weights(self) -> (f64, f64) {
        match self {
            LimitMode::OneSampleR => (1.0, 0.0),
            LimitMode::OneSampleS => (0.0, 1.0),
            LimitMode::TwoSample { delta } => (delta, 1.0 - delta),
        }
    }

    pub fn validate(self) -> Result<Self> {
        if let LimitMode::TwoSample { delta } = self {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::Config(format!("delta={delta} must lie in (0,1)")));
            }
        }
        Ok(self)
    }
}

/// Linear operators of the plan derivative at a solution with `β_{y1} = 0`.
///
/// `Y*` denotes `Y` without `y1`. `ax` maps `Y* → X` with entries `π/r_x`,
/// `ay` maps `X → Y*` with entries `π/s_y`, `bx` maps `X → Y*` and `by` maps
/// `Y → X`, both with entries `π/(r_x s_y)`; `by` keeps the `y1` column.
#[derive(Debug, Clone)]
pub struct DerivativeOperators {
    pub base: SinkhornSolution,
    pub y1_index: usize,
    pub ax: DMatrix<f64>,
    pub ay: DMatrix<f64>,
    pub bx: DMatrix<f64>,
    pub by: DMatrix<f64>,
    pub contraction_norm: f64,
    pub warning: Option<String>,
    r: Vec<f64>,
    s: Vec<f64>,
    lu_x: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_xt: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_y: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

/// Assembles the derivative operators. Requires full support on both sides and
/// a cost family with bounded X-variation.
pub fn build_operators(
    sol: &SinkhornSolution,
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
) -> Result<DerivativeOperators> {
    if !m.x_variation_bounded {
        return Err(Error::UnboundedXVariation);
    }
    if let Some(i) = r.weights().iter().position(|&w| w <= 0.0) {
        return Err(Error::ZeroMassAtom { side: "r", index: i });
    }
    if let Some(j) = s.weights().iter().position(|&w| w <= 0.0) {
        return Err(Error::ZeroMassAtom { side: "s", index: j });
    }
    let base = sol.normalized(Normalization::AnchoredAtY1, r, s);
    let (n, k) = (r.len(), s.len());
    let y1 = 0;
    let rw = r.weights();
    let sw = s.weights();
    let pi = &base.plan;
    let ax = DMatrix::from_fn(n, k - 1, |x, j| pi[(x, j + 1)] / rw[x]);
    let ay = DMatrix::from_fn(k - 1, n, |j, x| pi[(x, j + 1)] / sw[j + 1]);
    let bx = DMatrix::from_fn(k - 1, n, |j, x| pi[(x, j + 1)] / (rw[x] * sw[j + 1]));
    let by = DMatrix::from_fn(n, k, |x, y| pi[(x, y)] / (rw[x] * sw[y]));
    let axay = &ax * &ay;
    let contraction_norm = (0..n)
        .map(|i| axay.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if !(contraction_norm < 1.0 - 1e-9) {
        return Err(Error::ContractionViolated(contraction_norm));
    }
    let warning = (contraction_norm > CONTRACTION_WARN)
        .then(|| format!("contraction norm {contraction_norm} is close to 1; solves may be ill-conditioned"));
    let kx = DMatrix::identity(n, n) - axay;
    let lu_xt = kx.transpose().lu();
    let lu_x = kx.lu();
    let lu_y = (k > 1).then(|| (DMatrix::identity(k - 1, k - 1) - &ay * &ax).lu());
    Ok(DerivativeOperators {
        base,
        y1_index: y1,
        ax,
        ay,
        bx,
        by,
        contraction_norm,
        warning,
        r: rw.to_vec(),
        s: sw.to_vec(),
        lu_x,
        lu_xt,
        lu_y,
    })
}

impl DerivativeOperators {
    pub fn nx(&self) -> usize {
        self.r.len()
    }

    pub fn ny(&self) -> usize {
        self.s.len()
    }

    /// Right-hand sides `u = B^Y hY` and `v = B^X hX`.
    fn rhs(&self, hx: &[f64], hy: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let u = &self.by * DVector::from_column_slice(hy);
        let v = &self.bx * DVector::from_column_slice(hx);
        (u, v)
    }

    /// Solves the block system for the potential corrections `(ã, b̃)` with
    /// dense LU factorisations.
    pub fn corrections(&self, hx: &[f64], hy: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let (u, v) = self.rhs(hx, hy);
        let a = self.lu_x.solve(&(&u - &self.ax * &v)).expect("nonsingular by contraction");
        let b = match &self.lu_y {
            Some(lu) => lu.solve(&(&v - &self.ay * &u)).expect("nonsingular by contraction"),
            None => DVector::zeros(0),
        };
        (a, b)
    }

    /// Same corrections via truncated Neumann series.
    pub fn corrections_neumann(&self, hx: &[f64], hy: &[f64], max_terms: usize) -> (DVector<f64>, DVector<f64>) {
        let (u, v) = self.rhs(hx, hy);
        let neumann = |w: DVector<f64>, apply: &dyn Fn(&DVector<f64>) -> DVector<f64>| {
            let mut acc = w.clone();
            let mut term = w;
            for _ in 0..max_terms {
                term = apply(&term);
                acc += &term;
                if term.amax() <= 1e-17 * (1.0 + acc.amax()) {
                    break;
                }
            }
            acc
        };
        let a = neumann(&u - &self.ax * &v, &|t| &self.ax * (&self.ay * t));
        let b = neumann(&v - &self.ay * &u, &|t| &self.ay * (&self.ax * t));
        (a, b)
    }

    fn plan_from(&self, hx: &[f64], hy: &[f64], a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
        let pi = &self.base.plan;
        DMatrix::from_fn(self.nx(), self.ny(), |x, y| {
            let bt = if y == self.y1_index { 0.0 } else { b[y - 1] };
            pi[(x, y)] * (hx[x] / self.r[x] + hy[y] / self.s[y] - a[x] - bt)
        })
    }

    /// Plan derivative without the tangent-cone check.
    pub(crate) fn plan_derivative_raw(&self, hx: &[f64], hy: &[f64]) -> DMatrix<f64> {
        let (a, b) = self.corrections(hx, hy);
        self.plan_from(hx, hy, &a, &b)
    }
}

fn tangent_sums(ops: &DerivativeOperators, hx: &SignedVector, hy: &SignedVector) -> Result<()> {
    if hx.entries().len() != ops.nx() || hy.entries().len() != ops.ny() {
        return Err(Error::SpaceMismatch);
    }
    let (sx, sy) = (hx.sum(), hy.sum());
    if sx.abs() > TANGENT_TOL || sy.abs() > TANGENT_TOL {
        return Err(Error::NotInTangentCone { sum_x: sx, sum_y: sy });
    }
    Ok(())
}

/// Derivative of the plan in direction `(hX, hY)`:
/// `Dπ = π ⊙ (hX/r ⊕ hY/s) - π ⊙ (ã ⊕ (0, b̃))`.
pub fn plan_derivative(ops: &DerivativeOperators, hx: &SignedVector, hy: &SignedVector) -> Result<DMatrix<f64>> {
    tangent_sums(ops, hx, hy)?;
    Ok(ops.plan_derivative_raw(hx.entries(), hy.entries()))
}

/// Plan derivative computed through the Neumann series, for cross-checks.
pub fn plan_derivative_neumann(
    ops: &DerivativeOperators,
    hx: &SignedVector,
    hy: &SignedVector,
    max_terms: usize,
) -> Result<DMatrix<f64>> {
    tangent_sums(ops, hx, hy)?;
    let (a, b) = ops.corrections_neumann(hx.entries(), hy.entries(), max_terms);
    Ok(ops.plan_from(hx.entries(), hy.entries(), &a, &b))
}

/// `<α, hX> + <β, hY>`.
pub fn value_derivative(sol: &SinkhornSolution, hx: &SignedVector, hy: &SignedVector) -> Result<f64> {
    if hx.entries().len() != sol.alpha.len() || hy.entries().len() != sol.beta.len() {
        return Err(Error::SpaceMismatch);
    }
    let (sx, sy) = (hx.sum(), hy.sum());
    if sx.abs() > TANGENT_TOL || sy.abs() > TANGENT_TOL {
        return Err(Error::NotInTangentCone { sum_x: sx, sum_y: sy });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot(&sol.alpha, hx.entries()) + dot(&sol.beta, hy.entries()))
}

/// `Σ(r) = diag r - r rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialCovariance {
    pub matrix: DMatrix<f64>,
}

pub fn multinomial_covariance(r: &DiscreteMeasure) -> MultinomialCovariance {
    let w = r.weights();
    let n = w.len();
    MultinomialCovariance {
        matrix: DMatrix::from_fn(n, n, |i, j| if i == j { w[i] * (1.0 - w[i]) } else { -w[i] * w[j] }),
    }
}

/// Linear functional `(hX, hY) ↦ <gx, hX> + <gy, hY>` whose pushforward of the
/// Gaussian limit gives a scalar limit law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearLimit {
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
}

impl LinearLimit {
    /// `w_r Var_r[gx] + w_s Var_s[gy]`.
    pub fn variance(&self, r: &DiscreteMeasure, s: &DiscreteMeasure, mode: LimitMode) -> f64 {
        let (wr, ws) = mode.weights();
        let mut v = 0.0;
        if wr > 0.0 {
            v += wr * r.variance(&self.grad_x);
        }
        if ws > 0.0 {
            v += ws * s.variance(&self.grad_y);
        }
        v.max(0.0)
    }
}

/// Plug-in variance of the value limit: `Var_r[α]`, `Var_s[β]` or their
/// `δ`-weighted combination.
pub fn value_variance(sol: &SinkhornSolution, r: &DiscreteMeasure, s: &DiscreteMeasure, mode: LimitMode) -> f64 {
    value_limit(sol).variance(r, s, mode)
}

pub fn value_limit(sol: &SinkhornSolution) -> LinearLimit {
    LinearLimit {
        grad_x: sol.alpha.clone(),
        grad_y: sol.beta.clone(),
    }
}

/// Gradient of the Sinkhorn divergence: `α(r,s) - α(r,r)` and `β(r,s) - β(s,s)`.
pub fn divergence_limit(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<LinearLimit> {
    sinkhorn::require_symmetric(r, s, m)?;
    let rs = sinkhorn::solve(r, s, m, lambda, cfg)?;
    let rr = sinkhorn::solve(r, r, m, lambda, cfg)?;
    let ss = if r == s {
        rr.clone()
    } else {
        sinkhorn::solve(s, s, m, lambda, cfg)?
    };
    Ok(LinearLimit {
        grad_x: rs.alpha.iter().zip(&rr.alpha).map(|(a, b)| a - b).collect(),
        grad_y: rs.beta.iter().zip(&ss.beta).map(|(a, b)| a - b).collect(),
    })
}

pub fn divergence_variance(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    mode: LimitMode,
    cfg: &SolverConfig,
) -> Result<f64> {
    Ok(divergence_limit(r, s, m, lambda, cfg)?.variance(r, s, mode))
}

/// Gradient of `<f, π>` as a functional of `(r, s)`, obtained from one
/// transposed block solve.
pub fn plan_functional_limit(ops: &DerivativeOperators, f: &DMatrix<f64>) -> Result<LinearLimit> {
    let (n, k) = (ops.nx(), ops.ny());
    if f.shape() != (n, k) {
        return Err(Error::SpaceMismatch);
    }
    let pi = &ops.base.plan;
    let fp = f.component_mul(pi);
    let rho = DVector::from_fn(n, |x, _| fp.row(x).sum());
    let kappa = DVector::from_fn(k, |y, _| fp.column(y).sum());
    let kappa_star = kappa.rows(1, k - 1).into_owned();
    // Kᵀ w = (ρ, κ*) with K = [[I, AX], [AY, I]], solved by block elimination
    let (wx, wy) = solve_transposed_block(ops, &rho, &kappa_star);
    let grad_x = (0..n)
        .map(|x| {
            let corr: f64 = (0..k - 1).map(|j| wy[j] * ops.bx[(j, x)]).sum();
            rho[x] / ops.r[x] - corr
        })
        .collect();
    let grad_y = (0..k)
        .map(|y| {
            let corr: f64 = (0..n).map(|x| wx[x] * ops.by[(x, y)]).sum();
            kappa[y] / ops.s[y] - corr
        })
        .collect();
    Ok(LinearLimit { grad_x, grad_y })
}

/// Solves `[[I, AYᵀ], [AXᵀ, I]] (wx, wy) = (ρ, κ*)`.
fn solve_transposed_block(ops: &DerivativeOperators, rho: &DVector<f64>, kappa: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    // wx = (I - AYᵀ AXᵀ)⁻¹ (ρ - AYᵀ κ*) = ((I - AX AY)ᵀ)⁻¹ (...)
    let rhs_x = rho - ops.ay.transpose() * kappa;
    let wx = ops.lu_xt.solve(&rhs_x).expect("nonsingular by contraction");
    let wy = kappa - ops.ax.transpose() * &wx;
    (wx, wy)
}

/// Plug-in variance of the Sinkhorn cost `<c, π>`.
pub fn sinkhorn_cost_variance(
    ops: &DerivativeOperators,
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    mode: LimitMode,
) -> Result<f64> {
    Ok(plan_functional_limit(ops, &m.cost)?.variance(r, s, mode))
}

/// Jacobian rows `x ↦ <f_k, Dπ(e_x, 0)>` (or `(0, e_y)` for the s side).
///
/// Raw coordinate directions are used; `Σ(r)` annihilates constants, so the
/// quadratic form agrees with the tangent-space one.
fn jacobian(ops: &DerivativeOperators, fns: &[DMatrix<f64>], side_r: bool) -> DMatrix<f64> {
    let dim = if side_r { ops.nx() } else { ops.ny() };
    let cols: Vec<Vec<f64>> = (0..dim)
        .into_par_iter()
        .map(|i| {
            let mut hx = vec![0.0; ops.nx()];
            let mut hy = vec![0.0; ops.ny()];
            if side_r {
                hx[i] = 1.0;
            } else {
                hy[i] = 1.0;
            }
            let d = ops.plan_derivative_raw(&hx, &hy);
            fns.iter().map(|f| f.dot(&d)).collect()
        })
        .collect();
    DMatrix::from_fn(fns.len(), dim, |k, i| cols[i][k])
}

/// Covariance `J Σ Jᵀ` of the limits of `<f_k, π>` over a list of functions.
pub fn functional_covariance(
    ops: &DerivativeOperators,
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    fns: &[DMatrix<f64>],
    mode: LimitMode,
) -> Result<DMatrix<f64>> {
    if fns.iter().any(|f| f.shape() != (ops.nx(), ops.ny())) {
        return Err(Error::SpaceMismatch);
    }
    let (wr, ws) = mode.validate()?.weights();
    let k = fns.len();
    let mut out = DMatrix::zeros(k, k);
    if wr > 0.0 {
        let j = jacobian(ops, fns, true);
        out += (&j * multinomial_covariance(r).matrix * j.transpose()) * wr;
    }
    if ws > 0.0 {
        let j = jacobian(ops, fns, false);
        out += (&j * multinomial_covariance(s).matrix * j.transpose()) * ws;
    }
    // symmetrise and clamp round-off on the diagonal
    let sym = (&out + out.transpose()) * 0.5;
    Ok(DMatrix::from_fn(k, k, |a, b| {
        let v = sym[(a, b)];
        if a == b && v < 0.0 && v > -1e-12 {
            0.0
        } else {
            v
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceReport {
    pub lambda: f64,
    pub sigma2_value: f64,
    pub sigma2_value_s: f64,
    pub sigma2_value_two_sample: Option<f64>,
    pub delta: Option<f64>,
    pub sigma2_divergence: Option<f64>,
    pub sigma_tilde2_cost: Option<f64>,
    #[serde(serialize_with = "crate::sinkhorn::ser_matrix")]
    pub functional_cov: DMatrix<f64>,
    pub contraction_norm: Option<f64>,
    pub notes: Vec<String>,
}

/// Collects every plug-in variance available for the instance. Quantities whose
/// preconditions fail are left empty with a note.
#[allow(clippy::too_many_arguments)]
pub fn covariance_report(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    delta: Option<f64>,
    fns: &[DMatrix<f64>],
    cfg: &SolverConfig,
) -> Result<CovarianceReport> {
    let sol = sinkhorn::solve(r, s, m, lambda, cfg)?;
    let mut notes = Vec::new();
    let sigma2_value = value_variance(&sol, r, s, LimitMode::OneSampleR);
    let sigma2_value_s = value_variance(&sol, r, s, LimitMode::OneSampleS);
    let two = delta
        .map(|d| LimitMode::TwoSample { delta: d }.validate())
        .transpose()?;
    let sigma2_value_two_sample = two.map(|mode| value_variance(&sol, r, s, mode));
    let mode = two.unwrap_or(LimitMode::OneSampleR);
    let sigma2_divergence = match divergence_variance(r, s, m, lambda, mode, cfg) {
        Ok(v) => Some(v),
        Err(Error::AsymmetricSetup(why)) => {
            notes.push(format!("divergence variance skipped: {why}"));
            None
        }
        Err(e) => return Err(e),
    };
    let (sigma_tilde2_cost, functional_cov, contraction_norm) = match build_operators(&sol, r, s, m) {
        Ok(ops) => {
            if let Some(w) = &ops.warning {
                notes.push(w.clone());
            }
            let st = sinkhorn_cost_variance(&ops, r, s, m, mode)?;
            let fc = functional_covariance(&ops, r, s, fns, mode)?;
            (Some(st), fc, Some(ops.contraction_norm))
        }
        Err(e @ (Error::ZeroMassAtom { .. } | Error::UnboundedXVariation | Error::ContractionViolated(_))) => {
            notes.push(format!("plan derivative unavailable: {e}"));
            (None, DMatrix::zeros(0, 0), None)
        }
        Err(e) => return Err(e),
    };
    Ok(CovarianceReport {
        lambda,
        sigma2_value,
        sigma2_value_s,
        sigma2_value_two_sample,
        delta,
        sigma2_divergence,
        sigma_tilde2_cost,
        functional_cov,
        contraction_norm,
        notes,
    })
}

/// Draws from the Gaussian limit of a linear statistic: each draw is
/// `√w_r <gx, G_r> + √w_s <gy, G_s>` with `G_r = √r ⊙ z - r Σ √r z`.
pub fn sample_limit(
    limit: &LinearLimit,
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    mode: LimitMode,
    n_draws: usize,
    seed: u64,
) -> Vec<f64> {
    let (wr, ws) = mode.weights();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let one = |w: &[f64], g: &[f64], rng: &mut ChaCha20Rng| -> f64 {
        let mut lin = 0.0;
        let mut mix = 0.0;
        for (&p, &gi) in w.iter().zip(g) {
            let z: f64 = StandardNormal.sample(rng);
            let sz = p.sqrt() * z;
            lin += gi * sz;
            mix += sz;
        }
        lin - mix * w.iter().zip(g).map(|(p, gi)| p * gi).sum::<f64>()
    };
    (0..n_draws)
        .map(|_| {
            let mut d = 0.0;
            if wr > 0.0 {
                d += wr.sqrt() * one(r.weights(), &limit.grad_x, &mut rng);
            }
            if ws > 0.0 {
                d += ws.sqrt() * one(s.weights(), &limit.grad_y, &mut rng);
            }
            d
        })
        .collect()
}

/// `Σ (C_X(x) + C_Y(y)) |H_{xy}|`.
pub fn weighted_plan_norm(h: &DMatrix<f64>, profile: &WeightProfile) -> f64 {
    let mut t = 0.0;
    for x in 0..h.nrows() {
        for y in 0..h.ncols() {
            t += (profile.c_x.values[x] + profile.c_y.values[y]) * h[(x, y)].abs();
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDifferenceReport {
    pub steps: Vec<f64>,
    pub plan_errors: Vec<f64>,
    pub value_errors: Vec<f64>,
    pub plan_slope: f64,
    pub value_slope: f64,
    pub marginal_error: f64,
}

/// Least-squares slope of `log err` against `log t`.
pub fn loglog_slope(ts: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(errs)
        .filter(|(_, e)| **e > 0.0)
        .map(|(t, e)| (t.ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Compares forward differences of the re-solved plan and value along
/// `(r + t hX, s + t hY)` with the analytic derivatives.
pub fn finite_difference_check(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    hx: &SignedVector,
    hy: &SignedVector,
    steps: &[f64],
) -> Result<FiniteDifferenceReport> {
    let cfg = SolverConfig {
        tol: 1e-14,
        ..Default::default()
    };
    let sol = sinkhorn::solve(r, s, m, lambda, &cfg)?;
    let ops = build_operators(&sol, r, s, m)?;
    let dpi = plan_derivative(&ops, hx, hy)?;
    let dv = value_derivative(&sol, hx, hy)?;
    let profile = m.profile(lambda);
    let mut marginal_error: f64 = 0.0;
    for x in 0..dpi.nrows() {
        marginal_error = marginal_error.max((dpi.row(x).sum() - hx.entries()[x]).abs());
    }
    for y in 0..dpi.ncols() {
        marginal_error = marginal_error.max((dpi.column(y).sum() - hy.entries()[y]).abs());
    }
    let mut plan_errors = Vec::new();
    let mut value_errors = Vec::new();
    for &t in steps {
        let rt = perturb(r, hx, t)?;
        let st = perturb(s, hy, t)?;
        let pt = sinkhorn::solve(&rt, &st, m, lambda, &cfg)?;
        let fd = (&pt.plan - &sol.plan) / t - &dpi;
        plan_errors.push(weighted_plan_norm(&fd, &profile));
        value_errors.push(((pt.value - sol.value) / t - dv).abs());
    }
    Ok(FiniteDifferenceReport {
        steps: steps.to_vec(),
        plan_slope: loglog_slope(steps, &plan_errors),
        value_slope: loglog_slope(steps, &value_errors),
        plan_errors,
        value_errors,
        marginal_error,
    })
}

fn perturb(r: &DiscreteMeasure, h: &SignedVector, t: f64) -> Result<DiscreteMeasure> {
    let w: Vec<f64> = r.weights().iter().zip(h.entries()).map(|(a, b)| a + t * b).collect();
    crate::measures::validate_measure(w, r.space().clone(), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{build_cost, CostSpec};
    use crate::measures::{validate_measure, IndexedSpace, MeasureSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn measure(w: &[f64]) -> DiscreteMeasure {
        let sp = Arc::new(IndexedSpace::integers(w.len()).unwrap());
        validate_measure(w.to_vec(), sp, true).unwrap()
    }

    fn discrete(n: usize) -> CostModel {
        let sp = IndexedSpace::integers(n).unwrap();
        build_cost(&CostSpec::discrete(), &sp, &sp, 1.0).unwrap().0
    }

    fn tangent(v: Vec<f64>) -> SignedVector {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        SignedVector::tangent(
            Arc::new(IndexedSpace::integers(n).unwrap()),
            v.into_iter().map(|x| x - mean).collect(),
        )
        .unwrap()
    }

    fn random_instance(seed: u64, n: usize) -> (DiscreteMeasure, DiscreteMeasure, CostModel) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
            let t: f64 = w.iter().sum();
            measure(&w.iter().map(|v| v / t).collect::<Vec<_>>())
        };
        let r = draw();
        let s = draw();
        let m = CostModel::from_table(DMatrix::from_fn(n, n, |_, _| rng.random::<f64>())).unwrap();
        (r, s, m)
    }

    #[test]
    fn two_by_two_operators() {
        let u = measure(&[0.5, 0.5]);
        let m = discrete(2);
        let sol = sinkhorn::solve(&u, &u, &m, 1.0, &SolverConfig::default()).unwrap();
        let ops = build_operators(&sol, &u, &u, &m).unwrap();
        for j in 0..ops.ay.nrows() {
            assert_abs_diff_eq!(ops.ay.row(j).sum(), 1.0, epsilon = 1e-12);
        }
        // AX AY is 2x2 with row sums π_{x,1}/r_x; for x = 0 that is the off-diagonal mass 2·t_off
        let e = 1f64.exp();
        let off = 1.0 / (2.0 * (1.0 + e));
        assert_abs_diff_eq!(ops.contraction_norm, 2.0 * (0.5 - off).max(off), epsilon = 1e-10);
        assert!(ops.contraction_norm < 1.0);
        assert_eq!(ops.base.beta[0], 0.0);
    }

    #[test]
    fn product_plan_operators() {
        let r = measure(&[0.2, 0.3, 0.5]);
        let s = measure(&[0.6, 0.4]);
        let f = [0.1, 0.7, -0.3];
        let g = [1.0, 0.0];
        let m = CostModel::from_table(DMatrix::from_fn(3, 2, |i, j| f[i] + g[j])).unwrap();
        let sol = sinkhorn::solve(&r, &s, &m, 0.5, &SolverConfig::default()).unwrap();
        let ops = build_operators(&sol, &r, &s, &m).unwrap();
        for x in 0..3 {
            assert_abs_diff_eq!(ops.ax[(x, 0)], 0.4, epsilon = 1e-12);
            assert_abs_diff_eq!(ops.ay[(0, x)], r.weights()[x], epsilon = 1e-12);
        }
        // separable cost: σ̃² reduces to Var_r[f] in the one-sample-r mode
        let v = sinkhorn_cost_variance(&ops, &r, &s, &m, LimitMode::OneSampleR).unwrap();
        assert_abs_diff_eq!(v, r.variance(&f), epsilon = 1e-12);
    }

    #[test]
    fn operator_errors() {
        let r = measure(&[0.5, 0.0, 0.5]);
        let m = discrete(3);
        let sol = sinkhorn::solve(&r, &r, &m, 1.0, &SolverConfig::default()).unwrap();
        assert!(matches!(
            build_operators(&sol, &r, &r, &m),
            Err(Error::ZeroMassAtom { side: "r", index: 1 })
        ));
        let g = MeasureSpec::Geometric { q: 0.5, size: Some(6), finite: true }.build().unwrap();
        let spec = CostSpec::MetricPower {
            p: 2.0,
            anchor: crate::costs::Anchor::Scalar(0.0),
            epsilon: 0.5,
            gamma: 1.0,
            norm: crate::costs::NormKind::L2,
        };
        let (um, _) = build_cost(&spec, g.space(), g.space(), 1.0).unwrap();
        let sol = sinkhorn::solve(&g, &g, &um, 1.0, &SolverConfig::default()).unwrap();
        assert!(matches!(build_operators(&sol, &g, &g, &um), Err(Error::UnboundedXVariation)));
    }

    #[test]
    fn derivative_zero_and_tangent_errors() {
        let (r, s, m) = random_instance(3, 4);
        let sol = sinkhorn::solve(&r, &s, &m, 1.0, &SolverConfig::default()).unwrap();
        let ops = build_operators(&sol, &r, &s, &m).unwrap();
        let z = tangent(vec![0.0; 4]);
        let d = plan_derivative(&ops, &z, &z).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        let sp = Arc::new(IndexedSpace::integers(4).unwrap());
        let bad = SignedVector::new(sp, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(plan_derivative(&ops, &bad, &z), Err(Error::NotInTangentCone { .. })));
        assert!(matches!(value_derivative(&sol, &bad, &z), Err(Error::NotInTangentCone { .. })));
    }

    #[test]
    fn value_derivative_two_point() {
        let (r, s, m) = random_instance(5, 4);
        let sol = sinkhorn::solve(&r, &s, &m, 1.0, &SolverConfig::default()).unwrap();
        let sp = Arc::new(IndexedSpace::integers(4).unwrap());
        let hx = SignedVector::tangent(sp.clone(), vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let z = SignedVector::tangent(sp.clone(), vec![0.0; 4]).unwrap();
        assert_abs_diff_eq!(
            value_derivative(&sol, &hx, &z).unwrap(),
            sol.alpha[0] - sol.alpha[1],
            epsilon = 1e-14
        );
        let neg = SignedVector::tangent(sp, vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            value_derivative(&sol, &hx, &z).unwrap() + value_derivative(&sol, &neg, &z).unwrap(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn multinomial_examples() {
        let u = measure(&[0.5, 0.5]);
        assert_eq!(
            multinomial_covariance(&u).matrix,
            DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25])
        );
        let p = measure(&[0.0, 1.0, 0.0]);
        assert!(multinomial_covariance(&p).matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_variance_examples() {
        let m = discrete(2);
        let u = measure(&[0.5, 0.5]);
        let sol = sinkhorn::solve(&u, &u, &m, 1.0, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(value_variance(&sol, &u, &u, LimitMode::OneSampleR), 0.0, epsilon = 1e-20);
        let r = measure(&[0.3, 0.7]);
        let sol = sinkhorn::solve(&r, &u, &m, 1.0, &SolverConfig::default()).unwrap();
        let expect = 0.21 * (sol.alpha[0] - sol.alpha[1]).powi(2);
        assert_abs_diff_eq!(value_variance(&sol, &r, &u, LimitMode::OneSampleR), expect, epsilon = 1e-15);
        let p = measure(&[1.0, 0.0]);
        let sol = sinkhorn::solve(&p, &u, &m, 1.0, &SolverConfig::default()).unwrap();
        assert_eq!(value_variance(&sol, &p, &u, LimitMode::OneSampleR), 0.0);
    }

    #[test]
    fn divergence_variance_examples() {
        let m = discrete(3);
        let cfg = SolverConfig::default();
        let r = measure(&[0.2, 0.5, 0.3]);
        assert_eq!(divergence_variance(&r, &r, &m, 1.0, LimitMode::OneSampleR, &cfg).unwrap(), 0.0);
        let p = measure(&[0.0, 1.0, 0.0]);
        let s = measure(&[0.6, 0.1, 0.3]);
        assert_eq!(divergence_variance(&p, &s, &m, 1.0, LimitMode::OneSampleR, &cfg).unwrap(), 0.0);
        assert!(divergence_variance(&r, &s, &m, 1.0, LimitMode::OneSampleR, &cfg).unwrap() > 1e-6);
    }

    #[test]
    fn functional_covariance_examples() {
        let (r, s, m) = random_instance(9, 3);
        let sol = sinkhorn::solve(&r, &s, &m, 0.8, &SolverConfig::default()).unwrap();
        let ops = build_operators(&sol, &r, &s, &m).unwrap();
        let ones = DMatrix::from_element(3, 3, 1.0);
        let mode = LimitMode::TwoSample { delta: 0.4 };
        let c1 = functional_covariance(&ops, &r, &s, &[ones], mode).unwrap();
        assert!(c1[(0, 0)].abs() < 1e-14);
        let c = m.cost.clone();
        let cov = functional_covariance(&ops, &r, &s, &[c.clone(), &c * 2.0], mode).unwrap();
        let v = cov[(0, 0)];
        assert_abs_diff_eq!(cov[(0, 1)], 2.0 * v, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(1, 1)], 4.0 * v, epsilon = 1e-12);
        let st = sinkhorn_cost_variance(&ops, &r, &s, &m, mode).unwrap();
        assert_abs_diff_eq!(st, v, epsilon = 1e-12);
        let shifted = c.map(|x| x + 3.0);
        let cs = functional_covariance(&ops, &r, &s, &[shifted], mode).unwrap();
        assert_abs_diff_eq!(cs[(0, 0)], v, epsilon = 1e-12);
    }

    #[test]
    fn point_mass_cost_variance_zero() {
        let p = measure(&[1.0, 0.0]);
        let u = measure(&[0.5, 0.5]);
        let m = discrete(2);
        // zero mass in r prevents operator assembly; the adjoint gradient is
        // constant on supp r, so the variance vanishes through LinearLimit
        let sol = sinkhorn::solve(&p, &u, &m, 1.0, &SolverConfig::default()).unwrap();
        assert!(build_operators(&sol, &p, &u, &m).is_err());
        assert_eq!(value_variance(&sol, &p, &u, LimitMode::OneSampleR), 0.0);
    }

    #[test]
    fn sample_limit_contract() {
        let (r, s, m) = random_instance(4, 5);
        let sol = sinkhorn::solve(&r, &s, &m, 1.0, &SolverConfig::default()).unwrap();
        let lim = value_limit(&sol);
        assert!(sample_limit(&lim, &r, &s, LimitMode::OneSampleR, 0, 1).is_empty());
        let a = sample_limit(&lim, &r, &s, LimitMode::OneSampleR, 100_000, 7);
        let b = sample_limit(&lim, &r, &s, LimitMode::OneSampleR, 100_000, 7);
        assert_eq!(a, b);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let var = a.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64;
        let target = value_variance(&sol, &r, &s, LimitMode::OneSampleR);
        assert!((var / target - 1.0).abs() < 0.05, "{var} vs {target}");
    }

    #[test]
    fn finite_difference_first_order() {
        let (r, s, m) = random_instance(21, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let q: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let t: f64 = q.iter().sum();
        let hx = tangent(q.iter().zip(r.weights()).map(|(a, b)| a / t - b).collect());
        let hy = tangent(vec![0.0; 5]);
        let rep = finite_difference_check(&r, &s, &m, 0.7, &hx, &hy, &[1e-2, 1e-3, 1e-4]).unwrap();
        assert!(rep.plan_slope >= 0.9, "{rep:?}");
        assert!(rep.value_slope >= 0.9, "{rep:?}");
        assert!(rep.marginal_error <= 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn marginal_identity_and_neumann(seed in 0u64..1000, lambda in 0.3f64..3.0,
                                         hx in prop::collection::vec(-1.0f64..1.0, 5),
                                         hy in prop::collection::vec(-1.0f64..1.0, 5)) {
            let (r, s, m) = random_instance(seed, 5);
            let sol = sinkhorn::solve(&r, &s, &m, lambda, &SolverConfig::default()).unwrap();
            let ops = build_operators(&sol, &r, &s, &m).unwrap();
            prop_assert!(ops.contraction_norm < 1.0);
            let hx = tangent(hx);
            let hy = tangent(hy);
            let d = plan_derivative(&ops, &hx, &hy).unwrap();
            for x in 0..5 { prop_assert!((d.row(x).sum() - hx.entries()[x]).abs() <= 1e-9); }
            for y in 0..5 { prop_assert!((d.column(y).sum() - hy.entries()[y]).abs() <= 1e-9); }
            if ops.contraction_norm <= 0.9 {
                let n = plan_derivative_neumann(&ops, &hx, &hy, 10_000).unwrap();
                prop_assert!((&n - &d).amax() <= 1e-8);
            }
        }

        #[test]
        fn value_variance_normalisation_invariant(seed in 0u64..1000, lambda in 0.1f64..3.0) {
            let (r, s, m) = random_instance(seed, 4);
            let sol = sinkhorn::solve(&r, &s, &m, lambda, &SolverConfig::default()).unwrap();
            let anch = sol.normalized(Normalization::AnchoredAtY1, &r, &s);
            for mode in [LimitMode::OneSampleR, LimitMode::OneSampleS, LimitMode::TwoSample { delta: 0.3 }] {
                let a = value_variance(&sol, &r, &s, mode);
                let b = value_variance(&anch, &r, &s, mode);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
                prop_assert!(a >= 0.0);
            }
        }

        #[test]
        fn functional_cov_psd(seed in 0u64..1000) {
            let (r, s, m) = random_instance(seed, 4);
            let sol = sinkhorn::solve(&r, &s, &m, 1.0, &SolverConfig::default()).unwrap();
            let ops = build_operators(&sol, &r, &s, &m).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let fns: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>())).collect();
            let cov = functional_covariance(&ops, &r, &s, &fns, LimitMode::TwoSample { delta: 0.5 }).unwrap();
            prop_assert!((&cov - cov.transpose()).amax() <= 1e-12);
            let eig = cov.symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-9));
        }
    }
}
