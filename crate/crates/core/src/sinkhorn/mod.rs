//! Log-domain Sinkhorn solver for entropic optimal transport.

mod exact;

pub use exact::{exact_ot_small, potentials_unique_by_subsets, vanishing_reg_gap, GapReport, GapRow, OTSolution, EXACT_LIMIT};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costs::CostModel;
use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

/// Largest reduced dual dimension for which the Newton polish is attempted.
const NEWTON_MAX_DIM: usize = 600;
/// Sinkhorn sweeps before the first Newton attempt, and between later ones.
const NEWTON_FIRST: usize = 30;
const NEWTON_EVERY: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Normalization {
    /// `<α, r> = <β, s>`.
    #[default]
    Balanced,
    /// `β` vanishes at the first atom of `s` with positive mass.
    AnchoredAtY1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// ℓ¹ tolerance on the marginal residual of the implied plan.
    pub tol: f64,
    pub max_iter: usize,
    pub normalization: Normalization,
    /// Allow Newton steps on the dual once Sinkhorn has warmed up.
    pub newton: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 100_000,
            normalization: Normalization::Balanced,
            newton: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinkhornSolution {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub plan: DMatrix<f64>,
    pub lambda: f64,
    /// `<α, r> + <β, s>`.
    pub value: f64,
    /// `<c, π>`.
    pub cost_part: f64,
    pub mutual_info: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
    pub normalization: Normalization,
}

pub(crate) fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl SinkhornSolution {
    /// Shifts `(α, β) → (α - η, β + η)` into the requested normalisation.
    pub fn normalized(&self, norm: Normalization, r: &DiscreteMeasure, s: &DiscreteMeasure) -> Self {
        let eta = match norm {
            Normalization::Balanced => (r.expect(&self.alpha) - s.expect(&self.beta)) / 2.0,
            Normalization::AnchoredAtY1 => match s.weights().iter().position(|&w| w > 0.0) {
                Some(j) => -self.beta[j],
                None => 0.0,
            },
        };
        let mut out = self.clone();
        out.alpha.iter_mut().for_each(|a| *a -= eta);
        out.beta.iter_mut().for_each(|b| *b += eta);
        out.normalization = norm;
        out
    }

    /// `⟨c, π⟩ + λ M(π)` minus the dual objective at `(α, β)`.
    pub fn duality_gap(&self, r: &DiscreteMeasure, s: &DiscreteMeasure, m: &CostModel) -> f64 {
        let primal = self.cost_part + self.lambda * self.mutual_info;
        let mass: f64 = self.plan.iter().sum();
        let dual = r.expect(&self.alpha) + s.expect(&self.beta) - self.lambda * (mass - 1.0);
        let _ = m;
        primal - dual
    }
}

fn lse(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Dense problem restricted to the supports.
struct Reduced {
    ni: usize,
    nj: usize,
    /// Row-major cost on `supp r × supp s`.
    c: Vec<f64>,
    lr: Vec<f64>,
    ls: Vec<f64>,
    r: Vec<f64>,
    s: Vec<f64>,
    lambda: f64,
}

impl Reduced {
    fn update_alpha(&self, a: &mut [f64], b: &[f64]) {
        let l = self.lambda;
        for i in 0..self.ni {
            let row = &self.c[i * self.nj..(i + 1) * self.nj];
            a[i] = -l * lse((0..self.nj).map(|j| (b[j] - row[j]) / l + self.ls[j]));
        }
    }

    fn update_beta(&self, a: &[f64], b: &mut [f64]) {
        let l = self.lambda;
        for j in 0..self.nj {
            b[j] = -l * lse((0..self.ni).map(|i| (a[i] - self.c[i * self.nj + j]) / l + self.lr[i]));
        }
    }

    fn log_plan(&self, a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
        (a[i] + b[j] - self.c[i * self.nj + j]) / self.lambda + self.lr[i] + self.ls[j]
    }

    /// Row and column sums of the implied plan.
    fn marginals(&self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; self.ni];
        let mut cols = vec![0.0; self.nj];
        for i in 0..self.ni {
            for j in 0..self.nj {
                let p = self.log_plan(a, b, i, j).exp();
                rows[i] += p;
                cols[j] += p;
            }
        }
        (rows, cols)
    }

    fn residual(&self, a: &[f64], b: &[f64]) -> f64 {
        let (rows, cols) = self.marginals(a, b);
        l1_gap(&rows, &self.r) + l1_gap(&cols, &self.s)
    }

    fn dual_objective(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut mass = 0.0;
        for i in 0..self.ni {
            for j in 0..self.nj {
                mass += self.log_plan(a, b, i, j).exp();
            }
        }
        let lin: f64 = a.iter().zip(&self.r).map(|(x, w)| x * w).sum::<f64>()
            + b.iter().zip(&self.s).map(|(x, w)| x * w).sum::<f64>();
        lin - self.lambda * (mass - 1.0)
    }

    /// Damped Newton iterations on the dual with `β_0` held fixed.
    fn newton(&self, a: &mut [f64], b: &mut [f64], tol: f64) -> f64 {
        let (ni, nj) = (self.ni, self.nj);
        let dim = ni + nj - 1;
        let mut f = self.dual_objective(a, b);
        let mut resid = self.residual(a, b);
        for _ in 0..100 {
            if resid <= tol * 0.01 {
                break;
            }
            let mut plan = DMatrix::zeros(ni, nj);
            for i in 0..ni {
                for j in 0..nj {
                    plan[(i, j)] = self.log_plan(a, b, i, j).exp();
                }
            }
            let rows: Vec<f64> = (0..ni).map(|i| plan.row(i).sum()).collect();
            let cols: Vec<f64> = (0..nj).map(|j| plan.column(j).sum()).collect();
            let mut g = DVector::zeros(dim);
            for i in 0..ni {
                g[i] = self.r[i] - rows[i];
            }
            for j in 1..nj {
                g[ni + j - 1] = self.s[j] - cols[j];
            }
            let mut h = DMatrix::zeros(dim, dim);
            for i in 0..ni {
                h[(i, i)] = rows[i];
                for j in 1..nj {
                    h[(i, ni + j - 1)] = plan[(i, j)];
                    h[(ni + j - 1, i)] = plan[(i, j)];
                }
            }
            for j in 1..nj {
                h[(ni + j - 1, ni + j - 1)] = cols[j];
            }
            let d = match h.cholesky() {
                Some(ch) => ch.solve(&g) * self.lambda,
                None => break,
            };
            let slope = g.dot(&d);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let mut a2 = a.to_vec();
                let mut b2 = b.to_vec();
                for i in 0..ni {
                    a2[i] += t * d[i];
                }
                for j in 1..nj {
                    b2[j] += t * d[ni + j - 1];
                }
                let f2 = self.dual_objective(&a2, &b2);
                if f2.is_finite() {
                    let r2 = self.residual(&a2, &b2);
                    if f2 >= f + 1e-4 * t * slope || (r2 < resid && f2 >= f - 1e-12 * (1.0 + f.abs())) {
                        a.copy_from_slice(&a2);
                        b.copy_from_slice(&b2);
                        f = f2;
                        resid = r2;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        resid
    }
}

fn l1_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_dims(r: &DiscreteMeasure, s: &DiscreteMeasure, m: &CostModel) -> Result<()> {
    if r.len() != m.nrows() || s.len() != m.ncols() {
        return Err(Error::SpaceMismatch);
    }
    Ok(())
}

/// Solves the entropic problem by alternating log-sum-exp updates
/// `α_x ← -λ log Σ_y exp((β_y - c(x,y))/λ) s_y` and its mirror.
///
/// The fixed point is computed on the supports; potentials on zero-mass atoms
/// are then filled in from the same right-hand sides.
pub fn solve(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<SinkhornSolution> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda={lambda} must be positive")));
    }
    check_dims(r, s, m)?;
    let si = r.support();
    let sj = s.support();
    let red = Reduced {
        ni: si.len(),
        nj: sj.len(),
        c: si
            .iter()
            .flat_map(|&i| sj.iter().map(move |&j| (i, j)))
            .map(|(i, j)| m.cost[(i, j)])
            .collect(),
        lr: si.iter().map(|&i| r.weights()[i].ln()).collect(),
        ls: sj.iter().map(|&j| s.weights()[j].ln()).collect(),
        r: si.iter().map(|&i| r.weights()[i]).collect(),
        s: sj.iter().map(|&j| s.weights()[j]).collect(),
        lambda,
    };
    let mut a = vec![0.0; red.ni];
    let mut b = vec![0.0; red.nj];
    let mut it = 0;
    let newton_ok = cfg.newton && red.ni + red.nj - 1 <= NEWTON_MAX_DIM;
    let resid = loop {
        red.update_alpha(&mut a, &b);
        red.update_beta(&a, &mut b);
        it += 1;
        let (rows, _) = red.marginals(&a, &b);
        let resid = l1_gap(&rows, &red.r);
        if !resid.is_finite() {
            return Err(Error::NumericOverflow("Sinkhorn residual".into()));
        }
        if resid <= cfg.tol {
            break resid;
        }
        if it >= cfg.max_iter {
            return Err(Error::NonConvergence {
                iterations: it,
                residual: resid,
            });
        }
        if newton_ok && (it == NEWTON_FIRST || (it > NEWTON_FIRST && it % NEWTON_EVERY == 0)) {
            let (mut a2, mut b2) = (a.clone(), b.clone());
            let r2 = red.newton(&mut a2, &mut b2, cfg.tol);
            if r2.is_finite() && r2 < resid {
                a = a2;
                b = b2;
            }
        }
    };
    assemble(r, s, m, lambda, &si, &sj, &red, &a, &b, it, resid, cfg.normalization)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    si: &[usize],
    sj: &[usize],
    red: &Reduced,
    a: &[f64],
    b: &[f64],
    iterations: usize,
    resid: f64,
    norm: Normalization,
) -> Result<SinkhornSolution> {
    let (n, mm) = (r.len(), s.len());
    let mut alpha = vec![f64::NAN; n];
    let mut beta = vec![f64::NAN; mm];
    for (k, &i) in si.iter().enumerate() {
        alpha[i] = a[k];
    }
    for (k, &j) in sj.iter().enumerate() {
        beta[j] = b[k];
    }
    for i in 0..n {
        if r.weights()[i] == 0.0 {
            alpha[i] = -lambda * lse(sj.iter().map(|&j| (beta[j] - m.cost[(i, j)]) / lambda + s.weights()[j].ln()));
        }
    }
    for j in 0..mm {
        if s.weights()[j] == 0.0 {
            beta[j] = -lambda * lse(si.iter().map(|&i| (alpha[i] - m.cost[(i, j)]) / lambda + r.weights()[i].ln()));
        }
    }
    let mut plan = DMatrix::zeros(n, mm);
    let mut cost_part = 0.0;
    let mut mi = 0.0;
    for (ki, &i) in si.iter().enumerate() {
        for (kj, &j) in sj.iter().enumerate() {
            let lp = red.log_plan(a, b, ki, kj);
            let p = lp.exp();
            plan[(i, j)] = p;
            cost_part += p * m.cost[(i, j)];
            mi += p * (lp - red.lr[ki] - red.ls[kj]);
        }
    }
    let value = r.expect(&alpha) + s.expect(&beta);
    if !value.is_finite() || alpha.iter().chain(&beta).any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("non-finite potentials".into()));
    }
    let sol = SinkhornSolution {
        alpha,
        beta,
        plan,
        lambda,
        value,
        cost_part,
        mutual_info: mi.max(0.0),
        iterations,
        marginal_residual: resid,
        normalization: Normalization::Balanced,
    };
    Ok(sol.normalized(norm, r, s))
}

/// `M(π) = Σ π log(π / (r ⊗ s))` with `0 log 0 = 0`.
pub fn mutual_information(pi: &DMatrix<f64>, r: &DiscreteMeasure, s: &DiscreteMeasure) -> Result<f64> {
    if pi.nrows() != r.len() || pi.ncols() != s.len() {
        return Err(Error::SpaceMismatch);
    }
    let rows: Vec<f64> = (0..pi.nrows()).map(|i| pi.row(i).sum()).collect();
    let cols: Vec<f64> = (0..pi.ncols()).map(|j| pi.column(j).sum()).collect();
    let dev = l1_gap(&rows, r.weights()).max(l1_gap(&cols, s.weights()));
    if dev > 1e-8 {
        return Err(Error::MarginalMismatch(dev));
    }
    let mut m = 0.0;
    for i in 0..pi.nrows() {
        for j in 0..pi.ncols() {
            let p = pi[(i, j)];
            if p > 0.0 {
                m += p * (p / (r.weights()[i] * s.weights()[j])).ln();
            }
        }
    }
    Ok(m.max(0.0))
}

fn check_symmetric_setup(r: &DiscreteMeasure, s: &DiscreteMeasure, m: &CostModel) -> Result<()> {
    if !r.same_space(s) {
        return Err(Error::AsymmetricSetup("measures live on different spaces".into()));
    }
    if !m.is_symmetric() {
        return Err(Error::AsymmetricSetup("cost is not symmetric".into()));
    }
    Ok(())
}

/// `EROT(r,s) - (EROT(r,r) + EROT(s,s)) / 2`.
pub fn sinkhorn_divergence(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_symmetric_setup(r, s, m)?;
    let rs = solve(r, s, m, lambda, cfg)?.value;
    let rr = solve(r, r, m, lambda, cfg)?.value;
    let ss = solve(s, s, m, lambda, cfg)?.value;
    Ok(rs - 0.5 * (rr + ss))
}

pub(crate) fn require_symmetric(r: &DiscreteMeasure, s: &DiscreteMeasure, m: &CostModel) -> Result<()> {
    check_symmetric_setup(r, s, m)
}

/// Largest violation of each potential and plan bound (positive means violated).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub beta_lower: f64,
    pub beta_upper: f64,
    pub plan_lower: f64,
    pub plan_upper: f64,
    pub max_violation: f64,
    pub balanced_value_half: f64,
}

impl BoundReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

/// Evaluates the potential and plan bounds implied by the dominating functions,
/// in the balanced normalisation.
pub fn verify_bounds(sol: &SinkhornSolution, m: &CostModel, r: &DiscreteMeasure, s: &DiscreteMeasure) -> BoundReport {
    let sol = sol.normalized(Normalization::Balanced, r, s);
    let d = &m.primary;
    let l = sol.lambda;
    let ex: Vec<f64> = d.cx_minus.iter().zip(&d.cx_plus).map(|(a, b)| ((b - a) / l).exp()).collect();
    let ey: Vec<f64> = d.cy_minus.iter().zip(&d.cy_plus).map(|(a, b)| ((b - a) / l).exp()).collect();
    let mid = (r.expect(&d.cx_minus) + s.expect(&d.cy_minus)) / 2.0;
    let ex_r = r.expect(&ex);
    let ey_s = s.expect(&ey);
    let cxp_r = r.expect(&d.cx_plus);
    let cyp_s = s.expect(&d.cy_plus);
    let rel = |v: f64, scale: f64| v / (1.0 + scale.abs());
    let mut rep = BoundReport {
        alpha_lower: f64::NEG_INFINITY,
        alpha_upper: f64::NEG_INFINITY,
        beta_lower: f64::NEG_INFINITY,
        beta_upper: f64::NEG_INFINITY,
        plan_lower: f64::NEG_INFINITY,
        plan_upper: f64::NEG_INFINITY,
        max_violation: 0.0,
        balanced_value_half: sol.value / 2.0,
    };
    for (x, &a) in sol.alpha.iter().enumerate() {
        let lo = d.cx_minus[x] - cxp_r + mid - l * ey_s.ln();
        let hi = d.cx_plus[x] + cyp_s - mid;
        rep.alpha_lower = rep.alpha_lower.max(rel(lo - a, a));
        rep.alpha_upper = rep.alpha_upper.max(rel(a - hi, a));
    }
    for (y, &b) in sol.beta.iter().enumerate() {
        let lo = d.cy_minus[y] - cyp_s + mid - l * ex_r.ln();
        let hi = d.cy_plus[y] + cxp_r - mid;
        rep.beta_lower = rep.beta_lower.max(rel(lo - b, b));
        rep.beta_upper = rep.beta_upper.max(rel(b - hi, b));
    }
    for x in 0..r.len() {
        for y in 0..s.len() {
            let p = sol.plan[(x, y)];
            let rs = r.weights()[x] * s.weights()[y];
            let lo = rs / (ex[x] * ey[y] * ex_r * ex_r * ey_s * ey_s);
            let hi = rs * ex[x] * ey[y] * ex_r * ey_s;
            // relative to the product coupling, the natural scale of π
            let scale = rs.max(f64::MIN_POSITIVE);
            rep.plan_lower = rep.plan_lower.max(if rs > 0.0 { (lo - p) / scale } else { -p });
            rep.plan_upper = rep.plan_upper.max(if rs > 0.0 { (p - hi) / scale } else { p });
        }
    }
    rep.max_violation = [
        rep.alpha_lower,
        rep.alpha_upper,
        rep.beta_lower,
        rep.beta_upper,
        rep.plan_lower,
        rep.plan_upper,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    rep
}
