//! Exact transportation simplex for small instances, used as an oracle.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::Serialize;

use super::{solve, SolverConfig};
use crate::costs::CostModel;
use crate::error::{Error, Result};
use crate::measures::{entropy_pair, DiscreteMeasure};

/// Largest number of atoms per side accepted by [`exact_ot_small`].
pub const EXACT_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OTSolution {
    pub value: f64,
    #[serde(serialize_with = "super::ser_matrix")]
    pub plan: DMatrix<f64>,
    pub alpha0: Vec<f64>,
    pub beta0: Vec<f64>,
    /// Whether the vertex plan's support graph is a spanning tree on the supports.
    pub unique_potentials: bool,
    pub pivots: usize,
}

struct Basis {
    ni: usize,
    nj: usize,
    x: Vec<f64>,
    basic: Vec<bool>,
    cells: Vec<(usize, usize)>,
}

impl Basis {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.nj + j
    }

    /// Adjacency lists of the basis tree; rows are nodes `0..ni`, columns `ni..`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.ni + self.nj];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.ni + j, k));
            adj[self.ni + j].push((i, k));
        }
        adj
    }
}

fn northwest(r: &[f64], s: &[f64]) -> Basis {
    let (ni, nj) = (r.len(), s.len());
    let mut b = Basis {
        ni,
        nj,
        x: vec![0.0; ni * nj],
        basic: vec![false; ni * nj],
        cells: Vec::with_capacity(ni + nj - 1),
    };
    let mut rr = r.to_vec();
    let mut ss = s.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = rr[i].min(ss[j]);
        let k = b.idx(i, j);
        b.x[k] = q;
        b.basic[k] = true;
        b.cells.push((i, j));
        rr[i] -= q;
        ss[j] -= q;
        if i == ni - 1 && j == nj - 1 {
            break;
        }
        // advance exactly one index so the basis keeps ni + nj - 1 cells
        if i == ni - 1 || (j < nj - 1 && rr[i] > ss[j]) {
            j += 1;
        } else {
            i += 1;
        }
    }
    b
}

fn potentials(b: &Basis, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let adj = b.adjacency();
    let mut u = vec![f64::NAN; b.ni];
    let mut v = vec![f64::NAN; b.nj];
    u[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    let mut seen = vec![false; b.ni + b.nj];
    seen[0] = true;
    while let Some(node) = queue.pop_front() {
        for &(nb, k) in &adj[node] {
            if seen[nb] {
                continue;
            }
            seen[nb] = true;
            let (i, j) = b.cells[k];
            let cij = c[b.idx(i, j)];
            if node < b.ni {
                v[j] = cij - u[i];
            } else {
                u[i] = cij - v[j];
            }
            queue.push_back(nb);
        }
    }
    (u, v)
}

/// Path between two tree nodes as a list of basis-cell positions.
fn tree_path(adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
    let n = adj.len();
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        for &(nb, k) in &adj[node] {
            if !seen[nb] {
                seen[nb] = true;
                prev[nb] = Some((node, k));
                queue.push_back(nb);
            }
        }
    }
    let mut path = Vec::new();
    let mut cur = to;
    while cur != from {
        let (p, k) = prev[cur].expect("basis is a spanning tree");
        path.push(k);
        cur = p;
    }
    path.reverse();
    path
}

/// Solves `min <c, π>` over couplings of `r` and `s` with the transportation
/// simplex (MODI pricing, Bland's lowest-index rule for entering and leaving
/// cells).
pub fn exact_ot_small(r: &DiscreteMeasure, s: &DiscreteMeasure, m: &CostModel) -> Result<OTSolution> {
    if r.len() > EXACT_LIMIT || s.len() > EXACT_LIMIT {
        return Err(Error::TooLarge {
            rows: r.len(),
            cols: s.len(),
            limit: EXACT_LIMIT,
        });
    }
    if r.len() != m.nrows() || s.len() != m.ncols() {
        return Err(Error::SpaceMismatch);
    }
    let si = r.support();
    let sj = s.support();
    let rw: Vec<f64> = si.iter().map(|&i| r.weights()[i]).collect();
    let mut sw: Vec<f64> = sj.iter().map(|&j| s.weights()[j]).collect();
    // exact balance for the simplex
    let drift: f64 = rw.iter().sum::<f64>() - sw.iter().sum::<f64>();
    *sw.last_mut().unwrap() += drift;
    let nj = sj.len();
    let c: Vec<f64> = si
        .iter()
        .flat_map(|&i| sj.iter().map(move |&j| (i, j)))
        .map(|(i, j)| m.cost[(i, j)])
        .collect();
    let scale = c.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let eps = 1e-12 * scale;
    let mut b = northwest(&rw, &sw);
    let mut pivots = 0usize;
    let max_pivots = 50 * (si.len() + nj).pow(2) + 1000;
    loop {
        let (u, v) = potentials(&b, &c);
        let entering = (0..c.len()).find(|&k| !b.basic[k] && c[k] - u[k / nj] - v[k % nj] < -eps);
        let Some(k_in) = entering else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NonConvergence {
                iterations: pivots,
                residual: f64::NAN,
            });
        }
        let (ei, ej) = (k_in / nj, k_in % nj);
        let adj = b.adjacency();
        // cycle: entering (+), then alternating along the tree path column ej -> row ei
        let path = tree_path(&adj, b.ni + ej, ei);
        let mut theta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let (i, j) = b.cells[k];
                let val = b.x[b.idx(i, j)];
                let better = match leave {
                    None => true,
                    Some(l) => {
                        let (li, lj) = b.cells[l];
                        val < theta || (val == theta && b.idx(i, j) < b.idx(li, lj))
                    }
                };
                if better {
                    theta = val;
                    leave = Some(k);
                }
            }
        }
        let leave = leave.expect("cycle has a decreasing cell");
        for (pos, &k) in path.iter().enumerate() {
            let (i, j) = b.cells[k];
            let id = b.idx(i, j);
            if pos % 2 == 0 {
                b.x[id] -= theta;
            } else {
                b.x[id] += theta;
            }
        }
        let (li, lj) = b.cells[leave];
        let lid = b.idx(li, lj);
        b.x[lid] = 0.0;
        b.basic[lid] = false;
        b.x[k_in] = theta;
        b.basic[k_in] = true;
        b.cells[leave] = (ei, ej);
    }
    let (u, v) = potentials(&b, &c);
    let (n, mm) = (r.len(), s.len());
    let mut plan = DMatrix::zeros(n, mm);
    let mut value = 0.0;
    for (ki, &i) in si.iter().enumerate() {
        for (kj, &j) in sj.iter().enumerate() {
            let x = b.x[ki * nj + kj].max(0.0);
            plan[(i, j)] = x;
            value += x * m.cost[(i, j)];
        }
    }
    let mut alpha0 = vec![f64::NAN; n];
    let mut beta0 = vec![f64::NAN; mm];
    for (k, &i) in si.iter().enumerate() {
        alpha0[i] = u[k];
    }
    for (k, &j) in sj.iter().enumerate() {
        beta0[j] = v[k];
    }
    for i in 0..n {
        if r.weights()[i] == 0.0 {
            alpha0[i] = sj.iter().map(|&j| m.cost[(i, j)] - beta0[j]).fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..mm {
        if s.weights()[j] == 0.0 {
            beta0[j] = (0..n).map(|i| m.cost[(i, j)] - alpha0[i]).fold(f64::INFINITY, f64::min);
        }
    }
    let tol = 1e-14;
    let positive = b.x.iter().filter(|&&x| x > tol).count();
    let unique = positive == si.len() + nj - 1 && support_connected(&b, tol);
    Ok(OTSolution {
        value,
        plan,
        alpha0,
        beta0,
        unique_potentials: unique,
        pivots,
    })
}

fn support_connected(b: &Basis, tol: f64) -> bool {
    let n = b.ni + b.nj;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let nx = p[y];
            p[y] = r;
            y = nx;
        }
        r
    }
    let mut comps = n;
    for i in 0..b.ni {
        for j in 0..b.nj {
            if b.x[i * b.nj + j] > tol {
                let a = find(&mut parent, i);
                let c = find(&mut parent, b.ni + j);
                if a != c {
                    parent[a] = c;
                    comps -= 1;
                }
            }
        }
    }
    comps == 1
}

/// Brute-force check that no nonempty `A ⊆ supp r`, `B ⊆ supp s`, other than
/// the full pair, satisfies `Σ_A r = Σ_B s`. Returns `None` when the supports
/// are too large to enumerate (more than 20 atoms on either side).
pub fn potentials_unique_by_subsets(r: &DiscreteMeasure, s: &DiscreteMeasure, tol: f64) -> Option<bool> {
    let rw: Vec<f64> = r.weights().iter().copied().filter(|&w| w > 0.0).collect();
    let sw: Vec<f64> = s.weights().iter().copied().filter(|&w| w > 0.0).collect();
    if rw.len() > 20 || sw.len() > 20 {
        return None;
    }
    let sums = |w: &[f64]| -> Vec<f64> {
        (1u32..(1 << w.len()) - 1)
            .map(|mask| (0..w.len()).filter(|k| mask >> k & 1 == 1).map(|k| w[k]).sum())
            .collect()
    };
    let mut a = sums(&rw);
    let mut bs = sums(&sw);
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    bs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < bs.len() {
        if (a[i] - bs[j]).abs() <= tol {
            return Some(false);
        }
        if a[i] < bs[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Some(true)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub lambda: f64,
    pub erot: f64,
    pub sinkhorn_cost: f64,
    /// `S^λ - OT`.
    pub cost_gap: f64,
    /// `EROT^λ - OT`.
    pub value_gap: f64,
    /// `λ H(r, s)`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub ot_value: f64,
    pub entropy: f64,
    pub rows: Vec<GapRow>,
    pub all_hold: bool,
}

/// Checks `0 <= S^λ - OT <= EROT^λ - OT <= λ H(r,s)` for each `λ`.
pub fn vanishing_reg_gap(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    m: &CostModel,
    lambdas: &[f64],
    cfg: &SolverConfig,
) -> Result<GapReport> {
    let ot = exact_ot_small(r, s, m)?;
    let h = entropy_pair(r, s);
    let slack = 1e-9 * (1.0 + ot.value.abs());
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let sol = solve(r, s, m, lambda, cfg)?;
        let cost_gap = sol.cost_part - ot.value;
        let value_gap = sol.value - ot.value;
        let bound = lambda * h;
        let holds = cost_gap >= -slack && cost_gap <= value_gap + slack && value_gap <= bound + slack;
        rows.push(GapRow {
            lambda,
            erot: sol.value,
            sinkhorn_cost: sol.cost_part,
            cost_gap,
            value_gap,
            bound,
            holds,
        });
    }
    let all_hold = rows.iter().all(|r| r.holds);
    Ok(GapReport {
        ot_value: ot.value,
        entropy: h,
        rows,
        all_hold,
    })
}
