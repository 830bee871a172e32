//! Cost tables, dominating functions, weight profiles and summability checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, IndexedSpace, TailModel};

/// Relative slack allowed when checking the sandwich `c^- ⊕ c^- <= c <= c^+ ⊕ c^+`.
const SANDWICH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyTag {
    Bounded,
    MetricPower,
    SemiBoundedMetricPower,
    SeparabilityMetric,
    NormPower,
    Custom,
}

/// Separable lower and upper bounds of a cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominatingFunctions {
    pub cx_minus: Vec<f64>,
    pub cx_plus: Vec<f64>,
    pub cy_minus: Vec<f64>,
    pub cy_plus: Vec<f64>,
}

impl DominatingFunctions {
    fn constant(nx: usize, ny: usize, lo: f64, hi: f64) -> Self {
        DominatingFunctions {
            cx_minus: vec![lo; nx],
            cx_plus: vec![hi; nx],
            cy_minus: vec![lo; ny],
            cy_plus: vec![hi; ny],
        }
    }

    /// Largest violation of the sandwich and of `c^- <= c^+`.
    pub fn max_violation(&self, cost: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..cost.nrows() {
            worst = worst.max(self.cx_minus[i] - self.cx_plus[i]);
            for j in 0..cost.ncols() {
                let c = cost[(i, j)];
                let scale = 1.0 + c.abs();
                worst = worst.max((self.cx_minus[i] + self.cy_minus[j] - c) / scale);
                worst = worst.max((c - self.cx_plus[i] - self.cy_plus[j]) / scale);
            }
        }
        for j in 0..cost.ncols() {
            worst = worst.max(self.cy_minus[j] - self.cy_plus[j]);
        }
        worst
    }
}

/// `(1+d)^poly · exp(exp_coef · d^exp_order)` as `d → ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthRate {
    pub poly: f64,
    pub exp_coef: f64,
    pub exp_order: f64,
}

impl GrowthRate {
    pub const ONE: GrowthRate = GrowthRate {
        poly: 0.0,
        exp_coef: 0.0,
        exp_order: 0.0,
    };

    pub fn poly(poly: f64) -> Self {
        GrowthRate { poly, ..Self::ONE }
    }

    pub fn exp(coef: f64, order: f64) -> Self {
        if order <= 0.0 || coef == 0.0 {
            return Self::ONE;
        }
        GrowthRate {
            poly: 0.0,
            exp_coef: coef,
            exp_order: order,
        }
    }

    pub fn powf(self, e: f64) -> Self {
        GrowthRate {
            poly: self.poly * e,
            exp_coef: self.exp_coef * e,
            exp_order: self.exp_order,
        }
    }

    pub fn mul(self, o: GrowthRate) -> Self {
        let (coef, order) = if self.exp_coef == 0.0 {
            (o.exp_coef, o.exp_order)
        } else if o.exp_coef == 0.0 {
            (self.exp_coef, self.exp_order)
        } else if (self.exp_order - o.exp_order).abs() < 1e-12 {
            (self.exp_coef + o.exp_coef, self.exp_order)
        } else if self.exp_order > o.exp_order {
            (self.exp_coef, self.exp_order)
        } else {
            (o.exp_coef, o.exp_order)
        };
        GrowthRate {
            poly: self.poly + o.poly,
            exp_coef: if coef.abs() < 1e-14 { 0.0 } else { coef },
            exp_order: if coef.abs() < 1e-14 { 0.0 } else { order },
        }
    }

    /// Whether `Σ_{n>=1} (1+n)^poly exp(coef n^order)` converges.
    pub fn summable(self) -> bool {
        if self.exp_coef != 0.0 && self.exp_order > 0.0 {
            return self.exp_coef < 0.0;
        }
        self.poly < -1.0
    }
}

/// Leading behaviour of a dominating function: a sum `Σ coef · d^power`.
pub type Terms = Vec<(f64, f64)>;

/// Asymptotic forms of one collection of dominating functions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticForm {
    pub cx_minus: Terms,
    pub cx_plus: Terms,
    pub cy_minus: Terms,
    pub cy_plus: Terms,
}

impl AsymptoticForm {
    fn constant(lo: f64, hi: f64) -> Self {
        AsymptoticForm {
            cx_minus: vec![(lo, 0.0)],
            cx_plus: vec![(hi, 0.0)],
            cy_minus: vec![(lo, 0.0)],
            cy_plus: vec![(hi, 0.0)],
        }
    }

    fn c_growth(minus: &Terms, plus: &Terms) -> GrowthRate {
        let top = minus
            .iter()
            .chain(plus)
            .filter(|(c, _)| c.abs() > 0.0)
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        GrowthRate::poly(top)
    }

    fn e_growth(minus: &Terms, plus: &Terms, lambda: f64) -> GrowthRate {
        let mut diff: Vec<(f64, f64)> = Vec::new();
        for &(c, p) in plus.iter() {
            add_term(&mut diff, c, p);
        }
        for &(c, p) in minus.iter() {
            add_term(&mut diff, -c, p);
        }
        let lead = diff
            .iter()
            .filter(|(c, p)| c.abs() > 1e-14 && *p > 0.0)
            .fold(None::<(f64, f64)>, |acc, &(c, p)| match acc {
                Some((_, q)) if q >= p => acc,
                _ => Some((c, p)),
            });
        match lead {
            Some((c, p)) => GrowthRate::exp(c / lambda, p),
            None => GrowthRate::ONE,
        }
    }
}

fn add_term(v: &mut Vec<(f64, f64)>, c: f64, p: f64) {
    if let Some(t) = v.iter_mut().find(|t| (t.1 - p).abs() < 1e-12) {
        t.0 += c;
    } else {
        v.push((c, p));
    }
}

/// Cost table with the dominating-function collections it was built from.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub cost: DMatrix<f64>,
    pub primary: DominatingFunctions,
    pub secondary: Option<DominatingFunctions>,
    pub family: FamilyTag,
    pub x_variation_bounded: bool,
    pub y_variation_bounded: bool,
    pub asymptotics: Option<AsymptoticForm>,
    pub asymptotics_secondary: Option<AsymptoticForm>,
    /// Parameters actually used, for reports.
    pub params: serde_json::Value,
}

impl CostModel {
    pub fn nrows(&self) -> usize {
        self.cost.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.cost.ncols()
    }

    pub fn secondary_or_primary(&self) -> &DominatingFunctions {
        self.secondary.as_ref().unwrap_or(&self.primary)
    }

    /// Bounded family around an arbitrary table: `c^- = min c / 2`, `c^+ = max c / 2`.
    pub fn from_table(cost: DMatrix<f64>) -> Result<Self> {
        build_bounded(cost, FamilyTag::Custom, serde_json::json!({"family": "custom"}))
    }

    pub fn is_symmetric(&self) -> bool {
        let c = &self.cost;
        c.nrows() == c.ncols()
            && (0..c.nrows()).all(|i| (0..i).all(|j| (c[(i, j)] - c[(j, i)]).abs() <= 1e-12 * (1.0 + c[(i, j)].abs())))
    }

    /// Weight profile at regularisation `lambda`.
    pub fn profile(&self, lambda: f64) -> WeightProfile {
        let p = &self.primary;
        let q = self.secondary_or_primary();
        let cw = |m: &[f64], pl: &[f64]| {
            crate::measures::WeightFunction::new(
                m.iter().zip(pl).map(|(a, b)| 1.0 + a.abs() + b.abs()).collect(),
            )
        };
        let ew = |m: &[f64], pl: &[f64]| {
            crate::measures::WeightFunction::new(
                m.iter().zip(pl).map(|(a, b)| ((b - a) / lambda).exp()).collect(),
            )
        };
        let growth = self.asymptotics.as_ref().map(|a| {
            let b = self.asymptotics_secondary.as_ref().unwrap_or(a);
            ProfileGrowth {
                c_x: AsymptoticForm::c_growth(&a.cx_minus, &a.cx_plus),
                c_y: AsymptoticForm::c_growth(&a.cy_minus, &a.cy_plus),
                e_x: AsymptoticForm::e_growth(&a.cx_minus, &a.cx_plus, lambda),
                e_y: AsymptoticForm::e_growth(&a.cy_minus, &a.cy_plus, lambda),
                c_x_tilde: AsymptoticForm::c_growth(&b.cx_minus, &b.cx_plus),
                c_y_tilde: AsymptoticForm::c_growth(&b.cy_minus, &b.cy_plus),
                e_x_tilde: AsymptoticForm::e_growth(&b.cx_minus, &b.cx_plus, lambda),
                e_y_tilde: AsymptoticForm::e_growth(&b.cy_minus, &b.cy_plus, lambda),
            }
        });
        WeightProfile {
            lambda,
            c_x: cw(&p.cx_minus, &p.cx_plus),
            c_y: cw(&p.cy_minus, &p.cy_plus),
            e_x: ew(&p.cx_minus, &p.cx_plus),
            e_y: ew(&p.cy_minus, &p.cy_plus),
            c_x_tilde: cw(&q.cx_minus, &q.cx_plus),
            c_y_tilde: cw(&q.cy_minus, &q.cy_plus),
            e_x_tilde: ew(&q.cx_minus, &q.cx_plus),
            e_y_tilde: ew(&q.cy_minus, &q.cy_plus),
            x_variation_bounded: self.x_variation_bounded,
            growth,
        }
    }
}

/// Asymptotic growth of every weight, when the family provides it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileGrowth {
    pub c_x: GrowthRate,
    pub c_y: GrowthRate,
    pub e_x: GrowthRate,
    pub e_y: GrowthRate,
    pub c_x_tilde: GrowthRate,
    pub c_y_tilde: GrowthRate,
    pub e_x_tilde: GrowthRate,
    pub e_y_tilde: GrowthRate,
}

use crate::measures::WeightFunction;

/// `C = 1 + |c^+| + |c^-|` and `e = exp((c^+ - c^-)/λ)` for both collections.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightProfile {
    pub lambda: f64,
    pub c_x: WeightFunction,
    pub c_y: WeightFunction,
    pub e_x: WeightFunction,
    pub e_y: WeightFunction,
    pub c_x_tilde: WeightFunction,
    pub c_y_tilde: WeightFunction,
    pub e_x_tilde: WeightFunction,
    pub e_y_tilde: WeightFunction,
    pub x_variation_bounded: bool,
    pub growth: Option<ProfileGrowth>,
}

impl WeightProfile {
    /// `k_X^δ = C_X e_X^δ`.
    pub fn k_x(&self, delta: f64) -> WeightFunction {
        self.c_x.mul(&self.e_x.powf(delta))
    }

    pub fn k_y(&self, delta: f64) -> WeightFunction {
        self.c_y.mul(&self.e_y.powf(delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    #[default]
    L2,
    Linf,
}

impl NormKind {
    fn dist(self, a: &[f64], b: &[f64]) -> f64 {
        let it = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            NormKind::L1 => it.sum(),
            NormKind::L2 => it.map(|v| v * v).sum::<f64>().sqrt(),
            NormKind::Linf => it.fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Anchor {
    Scalar(f64),
    Point(Vec<f64>),
}

impl Default for Anchor {
    fn default() -> Self {
        Anchor::Scalar(0.0)
    }
}

impl Anchor {
    fn point(&self, dim: usize) -> Vec<f64> {
        match self {
            Anchor::Scalar(v) => vec![*v; dim],
            Anchor::Point(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundedBase {
    /// `c = 1{x != y}`, compared by label.
    Discrete,
    /// `c = d(x,y)^p` on bounded spaces.
    MetricPower {
        #[serde(default = "one")]
        p: f64,
        #[serde(default)]
        norm: NormKind,
    },
    /// Explicit table, one row per atom of X.
    Table { table: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSetting {
    Bounded,
    SemiBounded,
    Unbounded,
    Separated,
}

fn one() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    1.0
}

/// JSON description of a cost family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CostSpec {
    Bounded {
        #[serde(default = "discrete_base")]
        base: BoundedBase,
    },
    /// `d^p` on spaces unbounded on both sides.
    MetricPower {
        #[serde(default = "one")]
        p: f64,
        #[serde(default)]
        anchor: Anchor,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        norm: NormKind,
    },
    /// `d^p` with X bounded and Y unbounded.
    SemiBoundedMetricPower {
        #[serde(default = "one")]
        p: f64,
        #[serde(default)]
        anchor: Anchor,
        #[serde(default)]
        norm: NormKind,
    },
    /// `d` under a finite separability constant.
    SeparabilityMetric {
        #[serde(default)]
        anchor: Anchor,
        #[serde(default)]
        norm: NormKind,
        #[serde(default)]
        kappa_bound: Option<f64>,
    },
    /// `||x - y||^p` with a case split on the geometry.
    NormPower {
        #[serde(default = "one")]
        p: f64,
        setting: NormSetting,
        #[serde(default)]
        anchor: Anchor,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        norm: NormKind,
        #[serde(default)]
        kappa_bound: Option<f64>,
    },
    Custom {
        table: Vec<Vec<f64>>,
        #[serde(default)]
        cx_minus: Option<Vec<f64>>,
        #[serde(default)]
        cx_plus: Option<Vec<f64>>,
        #[serde(default)]
        cy_minus: Option<Vec<f64>>,
        #[serde(default)]
        cy_plus: Option<Vec<f64>>,
    },
}

fn discrete_base() -> BoundedBase {
    BoundedBase::Discrete
}

impl CostSpec {
    pub fn discrete() -> Self {
        CostSpec::Bounded {
            base: BoundedBase::Discrete,
        }
    }

    /// `|x - y|^p` on bounded spaces.
    pub fn bounded_metric(p: f64) -> Self {
        CostSpec::Bounded {
            base: BoundedBase::MetricPower {
                p,
                norm: NormKind::L2,
            },
        }
    }
}

/// Builds the cost model for `spec` on `X × Y` and its weight profile at `lambda`.
pub fn build_cost(
    spec: &CostSpec,
    x: &IndexedSpace,
    y: &IndexedSpace,
    lambda: f64,
) -> Result<(CostModel, WeightProfile)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidFamilyParams(format!("lambda={lambda} must be positive")));
    }
    let model = build_model(spec, x, y, lambda)?;
    let v = model.primary.max_violation(&model.cost);
    let v2 = model.secondary.as_ref().map_or(0.0, |s| s.max_violation(&model.cost));
    if v.max(v2) > SANDWICH_TOL {
        return Err(Error::InvalidFamilyParams(format!(
            "dominating functions violate the cost sandwich by {:e}",
            v.max(v2)
        )));
    }
    let profile = model.profile(lambda);
    Ok((model, profile))
}

fn build_model(spec: &CostSpec, x: &IndexedSpace, y: &IndexedSpace, lambda: f64) -> Result<CostModel> {
    let params = serde_json::to_value(spec).unwrap_or(serde_json::Value::Null);
    match spec {
        CostSpec::Bounded { base } => {
            let cost = match base {
                BoundedBase::Discrete => DMatrix::from_fn(x.size(), y.size(), |i, j| {
                    if x.labels()[i] == y.labels()[j] {
                        0.0
                    } else {
                        1.0
                    }
                }),
                BoundedBase::MetricPower { p, norm } => {
                    check_p(*p)?;
                    metric_table(x, y, *norm, *p)?
                }
                BoundedBase::Table { table } => table_to_matrix(table, x.size(), y.size())?,
            };
            build_bounded(cost, FamilyTag::Bounded, params)
        }
        CostSpec::MetricPower {
            p,
            anchor,
            epsilon,
            gamma,
            norm,
        } => unbounded(x, y, *p, anchor, *epsilon, *gamma, *norm, lambda, FamilyTag::MetricPower, params),
        CostSpec::SemiBoundedMetricPower { p, anchor, norm } => {
            semi_bounded(x, y, *p, anchor, *norm, FamilyTag::SemiBoundedMetricPower, params)
        }
        CostSpec::SeparabilityMetric {
            anchor,
            norm,
            kappa_bound,
        } => separability(x, y, anchor, *norm, *kappa_bound, FamilyTag::SeparabilityMetric, params),
        CostSpec::NormPower {
            p,
            setting,
            anchor,
            epsilon,
            gamma,
            norm,
            kappa_bound,
        } => {
            check_p(*p)?;
            if p.fract() != 0.0 {
                return Err(Error::InvalidFamilyParams(format!("norm power needs integer p, got {p}")));
            }
            match setting {
                NormSetting::Bounded => {
                    let cost = metric_table(x, y, *norm, *p)?;
                    build_bounded(cost, FamilyTag::NormPower, params)
                }
                NormSetting::SemiBounded => {
                    semi_bounded(x, y, *p, anchor, *norm, FamilyTag::NormPower, params)
                }
                NormSetting::Unbounded => unbounded(
                    x,
                    y,
                    *p,
                    anchor,
                    *epsilon,
                    *gamma,
                    *norm,
                    lambda,
                    FamilyTag::NormPower,
                    params,
                ),
                NormSetting::Separated => {
                    if *p != 1.0 || *norm != NormKind::L1 {
                        return Err(Error::InvalidFamilyParams(
                            "separated setting requires p = 1 and the l1 norm".into(),
                        ));
                    }
                    separability(x, y, anchor, *norm, *kappa_bound, FamilyTag::NormPower, params)
                }
            }
        }
        CostSpec::Custom {
            table,
            cx_minus,
            cx_plus,
            cy_minus,
            cy_plus,
        } => {
            let cost = table_to_matrix(table, x.size(), y.size())?;
            match (cx_minus, cx_plus, cy_minus, cy_plus) {
                (None, None, None, None) => build_bounded(cost, FamilyTag::Custom, params),
                (Some(a), Some(b), Some(c), Some(d)) => {
                    if a.len() != x.size() || b.len() != x.size() || c.len() != y.size() || d.len() != y.size() {
                        return Err(Error::InvalidFamilyParams(
                            "dominating function lengths do not match the spaces".into(),
                        ));
                    }
                    let xb = a.iter().zip(b).all(|(l, u)| (u - l).is_finite());
                    Ok(CostModel {
                        cost,
                        primary: DominatingFunctions {
                            cx_minus: a.clone(),
                            cx_plus: b.clone(),
                            cy_minus: c.clone(),
                            cy_plus: d.clone(),
                        },
                        secondary: None,
                        family: FamilyTag::Custom,
                        x_variation_bounded: xb,
                        y_variation_bounded: true,
                        asymptotics: None,
                        asymptotics_secondary: None,
                        params,
                    })
                }
                _ => Err(Error::InvalidFamilyParams(
                    "custom dominating functions must be given all four or none".into(),
                )),
            }
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidFamilyParams(format!("p={p} must be at least 1")));
    }
    Ok(())
}

fn table_to_matrix(table: &[Vec<f64>], nx: usize, ny: usize) -> Result<DMatrix<f64>> {
    if table.len() != nx || table.iter().any(|r| r.len() != ny) {
        return Err(Error::InvalidFamilyParams(format!("cost table must be {nx}x{ny}")));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidFamilyParams("cost table has non-finite entries".into()));
    }
    Ok(DMatrix::from_fn(nx, ny, |i, j| table[i][j]))
}

fn coords<'a>(s: &'a IndexedSpace, what: &str) -> Result<&'a [Vec<f64>]> {
    s.coords().ok_or_else(|| Error::MissingCoordinates(what.to_string()))
}

fn metric_table(x: &IndexedSpace, y: &IndexedSpace, norm: NormKind, p: f64) -> Result<DMatrix<f64>> {
    let cx = coords(x, "X")?;
    let cy = coords(y, "Y")?;
    if cx[0].len() != cy[0].len() {
        return Err(Error::MissingCoordinates("X and Y coordinates differ in dimension".into()));
    }
    Ok(DMatrix::from_fn(x.size(), y.size(), |i, j| norm.dist(&cx[i], &cy[j]).powf(p)))
}

fn anchor_dist(s: &IndexedSpace, anchor: &Anchor, norm: NormKind, what: &str) -> Result<Vec<f64>> {
    let c = coords(s, what)?;
    let z = anchor.point(c[0].len());
    if z.len() != c[0].len() {
        return Err(Error::InvalidFamilyParams("anchor dimension mismatch".into()));
    }
    Ok(c.iter().map(|v| norm.dist(v, &z)).collect())
}

fn build_bounded(cost: DMatrix<f64>, family: FamilyTag, params: serde_json::Value) -> Result<CostModel> {
    let lo = cost.min();
    let hi = cost.max();
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidFamilyParams("cost table has non-finite entries".into()));
    }
    let (nx, ny) = cost.shape();
    Ok(CostModel {
        primary: DominatingFunctions::constant(nx, ny, lo / 2.0, hi / 2.0),
        secondary: None,
        cost,
        family,
        x_variation_bounded: true,
        y_variation_bounded: true,
        asymptotics: Some(AsymptoticForm::constant(lo / 2.0, hi / 2.0)),
        asymptotics_secondary: None,
        params,
    })
}

fn semi_bounded(
    x: &IndexedSpace,
    y: &IndexedSpace,
    p: f64,
    anchor: &Anchor,
    norm: NormKind,
    family: FamilyTag,
    params: serde_json::Value,
) -> Result<CostModel> {
    check_p(p)?;
    let cost = metric_table(x, y, norm, p)?;
    let rx = anchor_dist(x, anchor, norm, "X")?.into_iter().fold(0.0, f64::max);
    let dy = anchor_dist(y, anchor, norm, "Y")?;
    let primary = DominatingFunctions {
        cx_minus: vec![0.0; x.size()],
        cx_plus: vec![0.0; x.size()],
        cy_minus: dy.iter().map(|d| (d - rx).max(0.0).powf(p)).collect(),
        cy_plus: dy.iter().map(|d| (d + rx).powf(p)).collect(),
    };
    // (d ± R)^p = d^p ± pR d^(p-1) + lower order
    let asym = AsymptoticForm {
        cx_minus: vec![],
        cx_plus: vec![],
        cy_minus: vec![(1.0, p), (-p * rx, p - 1.0)],
        cy_plus: vec![(1.0, p), (p * rx, p - 1.0)],
    };
    Ok(CostModel {
        cost,
        primary,
        secondary: None,
        family,
        x_variation_bounded: true,
        y_variation_bounded: false,
        asymptotics: Some(asym),
        asymptotics_secondary: None,
        params: with_field(params, "r_x", rx),
    })
}

fn separability(
    x: &IndexedSpace,
    y: &IndexedSpace,
    anchor: &Anchor,
    norm: NormKind,
    kappa_bound: Option<f64>,
    family: FamilyTag,
    params: serde_json::Value,
) -> Result<CostModel> {
    let cost = metric_table(x, y, norm, 1.0)?;
    let dx = anchor_dist(x, anchor, norm, "X")?;
    let dy = anchor_dist(y, anchor, norm, "Y")?;
    let mut kappa: f64 = 0.0;
    for i in 0..dx.len() {
        for j in 0..dy.len() {
            kappa = kappa.max(dx[i] + dy[j] - cost[(i, j)]);
        }
    }
    if let Some(b) = kappa_bound {
        if kappa > b {
            return Err(Error::SeparabilityViolated { kappa, bound: b });
        }
    }
    let primary = DominatingFunctions {
        cx_minus: dx.iter().map(|d| d - kappa / 2.0).collect(),
        cx_plus: dx.clone(),
        cy_minus: dy.iter().map(|d| d - kappa / 2.0).collect(),
        cy_plus: dy.clone(),
    };
    let asym = AsymptoticForm {
        cx_minus: vec![(1.0, 1.0), (-kappa / 2.0, 0.0)],
        cx_plus: vec![(1.0, 1.0)],
        cy_minus: vec![(1.0, 1.0), (-kappa / 2.0, 0.0)],
        cy_plus: vec![(1.0, 1.0)],
    };
    Ok(CostModel {
        cost,
        primary,
        secondary: None,
        family,
        x_variation_bounded: true,
        y_variation_bounded: true,
        asymptotics: Some(asym),
        asymptotics_secondary: None,
        params: with_field(params, "kappa", kappa),
    })
}

fn with_field(mut v: serde_json::Value, key: &str, val: f64) -> serde_json::Value {
    if let Some(o) = v.as_object_mut() {
        o.insert(key.to_string(), serde_json::json!(val));
    }
    v
}

/// Young coefficients for the mixed terms of `(a + b)^p`: for each
/// `i = 1..p-1`, `binom(p,i) a^(p-i) b^i <= κ a^(p-1+ε) + K_i b^(i q_i)` with
/// `κ = λγ/(2(p-1))`. Returns `(K_i, i q_i)`.
pub fn young_terms(p: u32, epsilon: f64, gamma: f64, lambda: f64) -> Vec<(f64, f64)> {
    if p < 2 {
        return vec![];
    }
    let pf = p as f64;
    let kappa = lambda * gamma / (2.0 * (pf - 1.0));
    (1..p)
        .map(|i| {
            let fi = i as f64;
            let big_p = (pf - 1.0 + epsilon) / (pf - fi);
            let q = (pf - 1.0 + epsilon) / (fi - 1.0 + epsilon);
            let binom = binomial(p, i);
            let k = binom.powf(q) * (kappa * big_p).powf(-(q - 1.0)) / q;
            (k, fi * q)
        })
        .collect()
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn unbounded(
    x: &IndexedSpace,
    y: &IndexedSpace,
    p: f64,
    anchor: &Anchor,
    epsilon: f64,
    gamma: f64,
    norm: NormKind,
    lambda: f64,
    family: FamilyTag,
    params: serde_json::Value,
) -> Result<CostModel> {
    check_p(p)?;
    if !(epsilon > 0.0) || !(gamma > 0.0) {
        return Err(Error::InvalidFamilyParams(format!(
            "epsilon={epsilon} and gamma={gamma} must be positive"
        )));
    }
    let cost = metric_table(x, y, norm, p)?;
    let dx = anchor_dist(x, anchor, norm, "X")?;
    let dy = anchor_dist(y, anchor, norm, "Y")?;
    if p.fract() != 0.0 {
        let s = 2f64.powf(p - 1.0);
        let primary = DominatingFunctions {
            cx_minus: vec![0.0; dx.len()],
            cx_plus: dx.iter().map(|d| s * d.powf(p)).collect(),
            cy_minus: vec![0.0; dy.len()],
            cy_plus: dy.iter().map(|d| s * d.powf(p)).collect(),
        };
        let asym = AsymptoticForm {
            cx_minus: vec![],
            cx_plus: vec![(s, p)],
            cy_minus: vec![],
            cy_plus: vec![(s, p)],
        };
        return Ok(CostModel {
            cost,
            primary,
            secondary: None,
            family,
            x_variation_bounded: false,
            y_variation_bounded: false,
            asymptotics: Some(asym),
            asymptotics_secondary: None,
            params,
        });
    }
    let pi = p as u32;
    let young = young_terms(pi, epsilon, gamma, lambda);
    let sign = if pi % 2 == 0 { 1.0 } else { -1.0 };
    let half = lambda * gamma / 2.0;
    let mix = |d: f64| young.iter().map(|(k, e)| k * d.powf(*e)).sum::<f64>();
    let near_minus = |d: f64| sign * d.powf(p) - mix(d);
    let near_plus = |d: f64| d.powf(p) + mix(d);
    let far_minus = |d: f64| d.powf(p) - half * d.powf(p - 1.0 + epsilon);
    let far_plus = |d: f64| d.powf(p) + half * d.powf(p - 1.0 + epsilon);
    let primary = DominatingFunctions {
        cx_minus: dx.iter().map(|&d| near_minus(d)).collect(),
        cx_plus: dx.iter().map(|&d| near_plus(d)).collect(),
        cy_minus: dy.iter().map(|&d| far_minus(d)).collect(),
        cy_plus: dy.iter().map(|&d| far_plus(d)).collect(),
    };
    let secondary = DominatingFunctions {
        cx_minus: dx.iter().map(|&d| far_minus(d)).collect(),
        cx_plus: dx.iter().map(|&d| far_plus(d)).collect(),
        cy_minus: dy.iter().map(|&d| near_minus(d)).collect(),
        cy_plus: dy.iter().map(|&d| near_plus(d)).collect(),
    };
    let near_m: Terms = std::iter::once((sign, p))
        .chain(young.iter().map(|&(k, e)| (-k, e)))
        .collect();
    let near_p: Terms = std::iter::once((1.0, p)).chain(young.iter().copied()).collect();
    let far_m: Terms = vec![(1.0, p), (-half, p - 1.0 + epsilon)];
    let far_p: Terms = vec![(1.0, p), (half, p - 1.0 + epsilon)];
    let params = {
        let mut v = params;
        if let Some(o) = v.as_object_mut() {
            o.insert(
                "young_terms".into(),
                serde_json::json!(young.iter().map(|(k, e)| [*k, *e]).collect::<Vec<_>>()),
            );
        }
        v
    };
    Ok(CostModel {
        cost,
        primary,
        secondary: Some(secondary),
        family,
        x_variation_bounded: false,
        y_variation_bounded: false,
        asymptotics: Some(AsymptoticForm {
            cx_minus: near_m.clone(),
            cx_plus: near_p.clone(),
            cy_minus: far_m.clone(),
            cy_plus: far_p.clone(),
        }),
        asymptotics_secondary: Some(AsymptoticForm {
            cx_minus: far_m,
            cx_plus: far_p,
            cy_minus: near_m,
            cy_plus: near_p,
        }),
        params,
    })
}

/// Subtracts `c_X^- ⊕ c_Y^-`; EROT values of the original equal those of the
/// shifted cost plus the returned offset.
pub fn shift_nonnegative(m: &CostModel, r: &DiscreteMeasure, s: &DiscreteMeasure) -> (CostModel, f64) {
    let p = &m.primary;
    let offset = r.expect(&p.cx_minus) + s.expect(&p.cy_minus);
    let cost = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        (m.cost[(i, j)] - p.cx_minus[i] - p.cy_minus[j]).max(0.0)
    });
    let shift = |d: &DominatingFunctions| DominatingFunctions {
        cx_minus: d.cx_minus.iter().zip(&p.cx_minus).map(|(a, b)| a - b).collect(),
        cx_plus: d.cx_plus.iter().zip(&p.cx_minus).map(|(a, b)| a - b).collect(),
        cy_minus: d.cy_minus.iter().zip(&p.cy_minus).map(|(a, b)| a - b).collect(),
        cy_plus: d.cy_plus.iter().zip(&p.cy_minus).map(|(a, b)| a - b).collect(),
    };
    let out = CostModel {
        cost,
        primary: shift(p),
        secondary: m.secondary.as_ref().map(shift),
        family: m.family,
        x_variation_bounded: m.x_variation_bounded,
        y_variation_bounded: m.y_variation_bounded,
        asymptotics: None,
        asymptotics_secondary: None,
        params: m.params.clone(),
    };
    (out, offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    OneSampleR,
    OneSampleS,
    TwoSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// One gated series `Σ w_x r_x^ρ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckedSum {
    pub description: String,
    pub partial_sum: f64,
    /// Ratio of the last two increments of the partial sums, a heuristic for
    /// non-parametric tails.
    pub tail_ratio: Option<f64>,
    pub analytic: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub theorem: String,
    pub mode: SampleMode,
    pub checked_sums: Vec<CheckedSum>,
    pub x_variation_bounded: Option<bool>,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

#[derive(Clone, Copy)]
enum Side {
    X,
    Y,
}

struct Gate<'a> {
    name: &'static str,
    side: Side,
    /// Weight factors as `(values, growth)` raised to the given powers.
    factors: Vec<(&'a WeightFunction, Option<GrowthRate>, f64)>,
    rho: f64,
}

fn tail_growth(m: &DiscreteMeasure) -> Option<GrowthRate> {
    let t = m.tail();
    let g = match t.model {
        TailModel::Finite | TailModel::Unknown => return None,
        TailModel::Geometric { q } => GrowthRate::exp(q.ln(), 1.0),
        TailModel::Polynomial { a } => GrowthRate::poly(-a),
        TailModel::SubWeibull { gamma, theta } => GrowthRate::exp(-gamma, theta),
    };
    Some(g)
}

fn evaluate(gates: Vec<Gate<'_>>, r: &DiscreteMeasure, s: &DiscreteMeasure) -> Vec<CheckedSum> {
    gates
        .into_iter()
        .map(|g| {
            let m = match g.side {
                Side::X => r,
                Side::Y => s,
            };
            let w = m.weights();
            let mut incs = Vec::with_capacity(w.len());
            let mut total = 0.0;
            for (i, &mass) in w.iter().enumerate() {
                let mut v = mass.powf(g.rho);
                for (f, _, e) in &g.factors {
                    v *= f.values[i].powf(*e);
                }
                total += v;
                incs.push(v);
            }
            let tail_ratio = if incs.len() >= 2 {
                let a = incs[incs.len() - 2];
                let b = incs[incs.len() - 1];
                (a > 0.0).then(|| b / a)
            } else {
                None
            };
            let analytic = match m.tail().model {
                TailModel::Finite => Some(Verdict::Pass),
                TailModel::Unknown => None,
                _ => {
                    let mut growth = tail_growth(m).unwrap().powf(g.rho);
                    growth = growth.mul(GrowthRate::poly(m.tail().shell_degree));
                    let mut known = true;
                    for (_, gr, e) in &g.factors {
                        match gr {
                            Some(gr) => growth = growth.mul(gr.powf(*e)),
                            None => known = false,
                        }
                    }
                    known.then(|| if growth.summable() { Verdict::Pass } else { Verdict::Fail })
                }
            };
            CheckedSum {
                description: g.name.to_string(),
                partial_sum: total,
                tail_ratio,
                analytic,
            }
        })
        .collect()
}

fn combine(
    theorem: &str,
    mode: SampleMode,
    sums: Vec<CheckedSum>,
    x_flag: Option<bool>,
    mut reasons: Vec<String>,
) -> ConditionReport {
    let mut verdict = Verdict::Pass;
    if x_flag == Some(false) {
        verdict = Verdict::Fail;
        reasons.push("unbounded X-variation".into());
    }
    for s in &sums {
        match s.analytic {
            Some(Verdict::Fail) => {
                verdict = Verdict::Fail;
                reasons.push(format!("{} diverges", s.description));
            }
            Some(_) => {}
            None => {
                if verdict == Verdict::Pass {
                    verdict = Verdict::Inconclusive;
                }
                reasons.push(format!("{}: no analytic tail model, partial sums only", s.description));
            }
        }
    }
    ConditionReport {
        theorem: theorem.to_string(),
        mode,
        checked_sums: sums,
        x_variation_bounded: x_flag,
        verdict,
        reasons,
    }
}

/// Summability conditions for the value limit laws.
pub fn check_value_conditions(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    p: &WeightProfile,
    mode: SampleMode,
) -> ConditionReport {
    let g = p.growth;
    let gr = |f: fn(&ProfileGrowth) -> GrowthRate| g.as_ref().map(f);
    let x_root = Gate {
        name: "sum C_X sqrt(r)",
        side: Side::X,
        factors: vec![(&p.c_x, gr(|g| g.c_x), 1.0)],
        rho: 0.5,
    };
    let x_sq = |name, w, gw| Gate {
        name,
        side: Side::X,
        factors: vec![(w, gw, 2.0)],
        rho: 1.0,
    };
    let gates = match mode {
        SampleMode::OneSampleR => vec![
            x_root,
            x_sq("sum C~_X^2 r", &p.c_x_tilde, gr(|g| g.c_x_tilde)),
            x_sq("sum e~_X^2 r", &p.e_x_tilde, gr(|g| g.e_x_tilde)),
            lin("sum C_Y s", Side::Y, &p.c_y, gr(|g| g.c_y), 1.0, 1.0),
            lin("sum C~_Y s", Side::Y, &p.c_y_tilde, gr(|g| g.c_y_tilde), 1.0, 1.0),
            lin("sum e_Y s", Side::Y, &p.e_y, gr(|g| g.e_y), 1.0, 1.0),
        ],
        SampleMode::OneSampleS => vec![
            lin("sum C~_Y sqrt(s)", Side::Y, &p.c_y_tilde, gr(|g| g.c_y_tilde), 1.0, 0.5),
            lin("sum C_Y^2 s", Side::Y, &p.c_y, gr(|g| g.c_y), 2.0, 1.0),
            lin("sum e_Y^2 s", Side::Y, &p.e_y, gr(|g| g.e_y), 2.0, 1.0),
            lin("sum C~_X r", Side::X, &p.c_x_tilde, gr(|g| g.c_x_tilde), 1.0, 1.0),
            lin("sum C_X r", Side::X, &p.c_x, gr(|g| g.c_x), 1.0, 1.0),
            lin("sum e~_X r", Side::X, &p.e_x_tilde, gr(|g| g.e_x_tilde), 1.0, 1.0),
        ],
        SampleMode::TwoSample => vec![
            x_root,
            x_sq("sum C~_X^2 r", &p.c_x_tilde, gr(|g| g.c_x_tilde)),
            x_sq("sum e~_X^2 r", &p.e_x_tilde, gr(|g| g.e_x_tilde)),
            lin("sum C~_Y sqrt(s)", Side::Y, &p.c_y_tilde, gr(|g| g.c_y_tilde), 1.0, 0.5),
            lin("sum C_Y^2 s", Side::Y, &p.c_y, gr(|g| g.c_y), 2.0, 1.0),
            lin("sum e_Y^2 s", Side::Y, &p.e_y, gr(|g| g.e_y), 2.0, 1.0),
        ],
    };
    let sums = evaluate(gates, r, s);
    combine("value", mode, sums, None, vec![])
}

fn lin<'a>(
    name: &'static str,
    side: Side,
    w: &'a WeightFunction,
    g: Option<GrowthRate>,
    e: f64,
    rho: f64,
) -> Gate<'a> {
    Gate {
        name,
        side,
        factors: vec![(w, g, e)],
        rho,
    }
}

/// Summability conditions for the plan limit laws, gated on bounded X-variation.
pub fn check_plan_conditions(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    p: &WeightProfile,
    mode: SampleMode,
) -> ConditionReport {
    let g = p.growth;
    let (rho_x, rho_y, nx, ny) = match mode {
        SampleMode::OneSampleR => (0.5, 1.0, "sum C_X sqrt(r)", "sum C_Y e_Y^4 s"),
        SampleMode::OneSampleS => (1.0, 0.5, "sum C_X r", "sum C_Y e_Y^4 sqrt(s)"),
        SampleMode::TwoSample => (0.5, 0.5, "sum C_X sqrt(r)", "sum C_Y e_Y^4 sqrt(s)"),
    };
    let gates = vec![
        lin(nx, Side::X, &p.c_x, g.map(|g| g.c_x), 1.0, rho_x),
        Gate {
            name: ny,
            side: Side::Y,
            factors: vec![(&p.c_y, g.map(|g| g.c_y), 1.0), (&p.e_y, g.map(|g| g.e_y), 4.0)],
            rho: rho_y,
        },
    ];
    let sums = evaluate(gates, r, s);
    combine("plan", mode, sums, Some(p.x_variation_bounded), vec![])
}

/// Summability conditions for the Sinkhorn divergence (`X = Y`), one sample from `r`
/// or two samples.
pub fn check_divergence_conditions(
    r: &DiscreteMeasure,
    s: &DiscreteMeasure,
    p: &WeightProfile,
    mode: SampleMode,
) -> ConditionReport {
    let g = p.growth;
    let gr = |f: fn(&ProfileGrowth) -> GrowthRate| g.as_ref().map(f);
    let sq = |name, side, w, gw| lin(name, side, w, gw, 2.0, 1.0);
    let mut gates = vec![
        lin("sum C_X sqrt(r)", Side::X, &p.c_x, gr(|g| g.c_x), 1.0, 0.5),
        lin("sum C_Y sqrt(r)", Side::X, &p.c_y, gr(|g| g.c_y), 1.0, 0.5),
        sq("sum C~_X^2 r", Side::X, &p.c_x_tilde, gr(|g| g.c_x_tilde)),
        sq("sum C~_Y^2 r", Side::X, &p.c_y_tilde, gr(|g| g.c_y_tilde)),
        sq("sum e~_X^2 r", Side::X, &p.e_x_tilde, gr(|g| g.e_x_tilde)),
        sq("sum e_Y^2 r", Side::X, &p.e_y, gr(|g| g.e_y), ),
    ];
    if mode == SampleMode::TwoSample {
        gates.extend([
            lin("sum C_X sqrt(s)", Side::Y, &p.c_x, gr(|g| g.c_x), 1.0, 0.5),
            lin("sum C_Y sqrt(s)", Side::Y, &p.c_y, gr(|g| g.c_y), 1.0, 0.5),
            sq("sum C~_X^2 s", Side::Y, &p.c_x_tilde, gr(|g| g.c_x_tilde)),
            sq("sum C~_Y^2 s", Side::Y, &p.c_y_tilde, gr(|g| g.c_y_tilde)),
            sq("sum e~_X^2 s", Side::Y, &p.e_x_tilde, gr(|g| g.e_x_tilde)),
            sq("sum e_Y^2 s", Side::Y, &p.e_y, gr(|g| g.e_y)),
        ]);
    } else {
        for (name, w, gw) in [
            ("sum C_X s", &p.c_x, gr(|g| g.c_x)),
            ("sum C_Y s", &p.c_y, gr(|g| g.c_y)),
            ("sum C~_X s", &p.c_x_tilde, gr(|g| g.c_x_tilde)),
            ("sum C~_Y s", &p.c_y_tilde, gr(|g| g.c_y_tilde)),
            ("sum e~_X s", &p.e_x_tilde, gr(|g| g.e_x_tilde)),
            ("sum e_Y s", &p.e_y, gr(|g| g.e_y)),
        ] {
            gates.push(lin(name, Side::Y, w, gw, 1.0, 1.0));
        }
    }
    let sums = evaluate(gates, r, s);
    combine("divergence", mode, sums, None, vec![])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{MeasureSpec, Tail};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn ints(n: usize) -> IndexedSpace {
        IndexedSpace::integers(n).unwrap()
    }

    #[test]
    fn bounded_discrete_profile() {
        let x = ints(4);
        let (m, p) = build_cost(&CostSpec::discrete(), &x, &x, 1.0).unwrap();
        assert_eq!(m.family, FamilyTag::Bounded);
        for v in p.c_x.values.iter().chain(&p.c_y.values) {
            assert_abs_diff_eq!(*v, 1.5, epsilon = 1e-15);
        }
        for v in p.e_x.values.iter().chain(&p.e_y.values) {
            assert_abs_diff_eq!(*v, 0.5f64.exp(), epsilon = 1e-15);
        }
        let k = p.k_x(2.0);
        assert_abs_diff_eq!(k.values[0], 1.5 * 1f64.exp(), epsilon = 1e-14);
    }

    #[test]
    fn separability_family() {
        let x = IndexedSpace::from_points(vec![-3.0, -1.0, 0.0]).unwrap();
        let y = IndexedSpace::from_points(vec![1.0, 2.5, 4.0]).unwrap();
        let spec = CostSpec::SeparabilityMetric {
            anchor: Anchor::Scalar(0.0),
            norm: NormKind::L1,
            kappa_bound: None,
        };
        let (m, p) = build_cost(&spec, &x, &y, 0.5).unwrap();
        assert_eq!(m.params["kappa"], 0.0);
        assert_eq!(m.primary.cx_minus, vec![3.0, 1.0, 0.0]);
        assert_eq!(m.primary.cx_plus, vec![3.0, 1.0, 0.0]);
        assert!(p.e_x.values.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn separability_constant_is_exhaustive_sup() {
        // X = {-1, 2}, Y = {1}: d(x,0)+d(0,y)-d(x,y) is 2 at x = 2
        let x = IndexedSpace::from_points(vec![-1.0, 2.0]).unwrap();
        let y = IndexedSpace::from_points(vec![1.0]).unwrap();
        let spec = CostSpec::SeparabilityMetric {
            anchor: Anchor::Scalar(0.0),
            norm: NormKind::L1,
            kappa_bound: None,
        };
        let (m, p) = build_cost(&spec, &x, &y, 2.0).unwrap();
        assert_eq!(m.params["kappa"], 2.0);
        assert_abs_diff_eq!(p.e_x.values[0], (2.0f64 / (2.0 * 2.0)).exp(), epsilon = 1e-15);
        let bounded = CostSpec::SeparabilityMetric {
            anchor: Anchor::Scalar(0.0),
            norm: NormKind::L1,
            kappa_bound: Some(1.0),
        };
        assert!(matches!(
            build_cost(&bounded, &x, &y, 1.0),
            Err(Error::SeparabilityViolated { .. })
        ));
    }

    #[test]
    fn semi_bounded_family() {
        let x = IndexedSpace::from_points(vec![0.0, 0.5, 1.0]).unwrap();
        let y = ints(51);
        let spec = CostSpec::SemiBoundedMetricPower {
            p: 1.0,
            anchor: Anchor::Scalar(0.0),
            norm: NormKind::L2,
        };
        let (m, _) = build_cost(&spec, &x, &y, 1.0).unwrap();
        for j in 0..51 {
            let d = j as f64;
            assert_eq!(m.primary.cy_plus[j], d + 1.0);
            assert_eq!(m.primary.cy_minus[j], (d - 1.0).max(0.0));
        }
        assert!(m.x_variation_bounded);
    }

    #[test]
    fn young_terms_known_values() {
        // p = 2, ε = 1/2, γ = λ = 1: P = 3/2, Q = 3, κ = 1/2, K = 2^3 (3/4)^(-2) / 3 = 128/27,
        // the tight constant of max_a (2ab - a^(3/2)/2) = 128 b^3 / 27
        let t = young_terms(2, 0.5, 1.0, 1.0);
        assert_eq!(t.len(), 1);
        assert_abs_diff_eq!(t[0].0, 128.0 / 27.0, epsilon = 1e-13);
        assert_abs_diff_eq!(t[0].1, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn unbounded_family_sandwich_and_flags() {
        let x = IndexedSpace::from_points((0..15).map(|i| i as f64 * 0.7 - 2.0).collect()).unwrap();
        let y = IndexedSpace::from_points((0..12).map(|i| i as f64 * 1.3 - 5.0).collect()).unwrap();
        for p in [1.0, 2.0, 3.0, 4.0] {
            for lambda in [0.1, 1.0, 5.0] {
                let spec = CostSpec::MetricPower {
                    p,
                    anchor: Anchor::Scalar(0.0),
                    epsilon: 0.5,
                    gamma: 1.0,
                    norm: NormKind::L2,
                };
                let (m, _) = build_cost(&spec, &x, &y, lambda).unwrap();
                assert!(m.primary.max_violation(&m.cost) <= 0.0);
                assert!(m.secondary.as_ref().unwrap().max_violation(&m.cost) <= 0.0);
                assert!(!m.x_variation_bounded);
            }
        }
        let frac = CostSpec::MetricPower {
            p: 1.5,
            anchor: Anchor::Scalar(0.0),
            epsilon: 0.5,
            gamma: 1.0,
            norm: NormKind::L2,
        };
        assert!(build_cost(&frac, &x, &y, 1.0).is_ok());
    }

    #[test]
    fn family_validation_errors() {
        let x = ints(3);
        let bad = CostSpec::SemiBoundedMetricPower {
            p: 0.5,
            anchor: Anchor::Scalar(0.0),
            norm: NormKind::L2,
        };
        assert!(matches!(build_cost(&bad, &x, &x, 1.0), Err(Error::InvalidFamilyParams(_))));
        let nocoords = IndexedSpace::new(vec!["a".into(), "b".into()], None).unwrap();
        assert!(matches!(
            build_cost(&CostSpec::bounded_metric(1.0), &nocoords, &nocoords, 1.0),
            Err(Error::MissingCoordinates(_))
        ));
        let sep = CostSpec::NormPower {
            p: 2.0,
            setting: NormSetting::Separated,
            anchor: Anchor::Scalar(0.0),
            epsilon: 0.5,
            gamma: 1.0,
            norm: NormKind::L1,
            kappa_bound: None,
        };
        assert!(matches!(build_cost(&sep, &x, &x, 1.0), Err(Error::InvalidFamilyParams(_))));
        let custom = CostSpec::Custom {
            table: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            cx_minus: Some(vec![0.0, 0.0]),
            cx_plus: Some(vec![0.0, 0.0]),
            cy_minus: Some(vec![0.0, 0.0]),
            cy_plus: Some(vec![0.0, 0.0]),
        };
        assert!(matches!(
            build_cost(&custom, &ints(2), &ints(2), 1.0),
            Err(Error::InvalidFamilyParams(_))
        ));
    }

    #[test]
    fn json_spec_roundtrip() {
        let s: CostSpec = serde_json::from_str(r#"{"family":"metric_power","p":2,"anchor":0,"epsilon":0.5,"gamma":1.0}"#).unwrap();
        assert!(matches!(s, CostSpec::MetricPower { p, .. } if p == 2.0));
        let b: CostSpec = serde_json::from_str(r#"{"family":"bounded","base":{"kind":"metric_power","p":1}}"#).unwrap();
        assert_eq!(b, CostSpec::Bounded { base: BoundedBase::MetricPower { p: 1.0, norm: NormKind::L2 } });
        let d: CostSpec = serde_json::from_str(r#"{"family":"bounded"}"#).unwrap();
        assert_eq!(d, CostSpec::discrete());
    }

    #[test]
    fn shift_examples() {
        let x = ints(3);
        let (m, _) = build_cost(&CostSpec::bounded_metric(1.0), &x, &x, 1.0).unwrap();
        let r = MeasureSpec::Uniform { size: 3 }.build().unwrap();
        let (sh, off) = shift_nonnegative(&m, &r, &r);
        assert_eq!(off, 0.0);
        assert_eq!(sh.cost, m.cost);

        let base = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 0.5]);
        let shifted = base.map(|v| v - 3.0);
        let custom = CostSpec::Custom {
            table: (0..2).map(|i| (0..2).map(|j| shifted[(i, j)]).collect()).collect(),
            cx_minus: Some(vec![-3.0, -3.0]),
            cx_plus: Some(vec![-1.0, -1.0]),
            cy_minus: Some(vec![0.0, 0.0]),
            cy_plus: Some(vec![0.0, 0.0]),
        };
        let (cm, _) = build_cost(&custom, &ints(2), &ints(2), 1.0).unwrap();
        let u = MeasureSpec::Uniform { size: 2 }.build().unwrap();
        let (sh, off) = shift_nonnegative(&cm, &u, &u);
        assert_eq!(off, -3.0);
        assert_eq!(sh.cost, base);
        assert!(sh.primary.max_violation(&sh.cost) <= 0.0);
    }

    fn geom(q: f64, n: usize) -> DiscreteMeasure {
        MeasureSpec::Geometric {
            q,
            size: Some(n),
            finite: false,
        }
        .build()
        .unwrap()
    }

    #[test]
    fn verdicts_bounded_tails() {
        let r = geom(0.5, 60);
        let sp = r.space().clone();
        let (_, p) = build_cost(&CostSpec::discrete(), &sp, &sp, 1.0).unwrap();
        let rep = check_value_conditions(&r, &r, &p, SampleMode::OneSampleR);
        assert_eq!(rep.verdict, Verdict::Pass);
        let poly = MeasureSpec::Polynomial {
            a: 2.0,
            size: Some(60),
            finite: false,
        }
        .build()
        .unwrap();
        let rep = check_value_conditions(&poly, &poly, &p, SampleMode::OneSampleR);
        assert_eq!(rep.verdict, Verdict::Fail);
        assert_eq!(rep.checked_sums[0].analytic, Some(Verdict::Fail));
        let plan = check_plan_conditions(&poly, &poly, &p, SampleMode::OneSampleR);
        assert_eq!(plan.verdict, Verdict::Fail);
        let fin = MeasureSpec::Uniform { size: 60 }.build().unwrap();
        assert_eq!(check_value_conditions(&fin, &fin, &p, SampleMode::TwoSample).verdict, Verdict::Pass);
        assert_eq!(check_plan_conditions(&fin, &fin, &p, SampleMode::TwoSample).verdict, Verdict::Pass);
        let unk = fin.clone().with_tail(Tail::default());
        assert_eq!(
            check_value_conditions(&unk, &unk, &p, SampleMode::OneSampleR).verdict,
            Verdict::Inconclusive
        );
    }

    #[test]
    fn verdicts_semi_bounded_subweibull() {
        let x = IndexedSpace::from_points(vec![0.0, 0.5, 1.0]).unwrap();
        let r = crate::measures::validate_measure(vec![0.2, 0.3, 0.5], Arc::new(x), false)
            .unwrap()
            .with_tail(Tail::finite());
        let s = MeasureSpec::SubWeibull {
            gamma: 1.0,
            theta: 1.5,
            size: None,
            finite: false,
        }
        .build()
        .unwrap();
        let spec = CostSpec::SemiBoundedMetricPower {
            p: 2.0,
            anchor: Anchor::Scalar(0.0),
            norm: NormKind::L2,
        };
        let (_, p) = build_cost(&spec, r.space(), s.space(), 1.0).unwrap();
        assert_eq!(check_plan_conditions(&r, &s, &p, SampleMode::OneSampleR).verdict, Verdict::Pass);
        assert_eq!(check_value_conditions(&r, &s, &p, SampleMode::TwoSample).verdict, Verdict::Pass);
        // order below p - 1 = 1 loses against e_Y^4
        let slow = MeasureSpec::SubWeibull {
            gamma: 1.0,
            theta: 0.8,
            size: Some(80),
            finite: false,
        }
        .build()
        .unwrap();
        let (_, p2) = build_cost(&spec, r.space(), slow.space(), 1.0).unwrap();
        assert_eq!(check_plan_conditions(&r, &slow, &p2, SampleMode::OneSampleR).verdict, Verdict::Fail);
    }

    #[test]
    fn verdict_unbounded_plan_fails() {
        let r = geom(0.5, 30);
        let sp = r.space().clone();
        let spec = CostSpec::MetricPower {
            p: 2.0,
            anchor: Anchor::Scalar(0.0),
            epsilon: 0.5,
            gamma: 1.0,
            norm: NormKind::L2,
        };
        let (_, p) = build_cost(&spec, &sp, &sp, 1.0).unwrap();
        let rep = check_plan_conditions(&r, &r, &p, SampleMode::OneSampleR);
        assert_eq!(rep.verdict, Verdict::Fail);
        assert!(rep.reasons.iter().any(|s| s == "unbounded X-variation"));
    }

    #[test]
    fn growth_rate_algebra() {
        let g = GrowthRate::exp(-1.0, 1.0).mul(GrowthRate::exp(2.0, 0.5));
        assert!(g.summable());
        let h = GrowthRate::exp(-1.0, 1.0).mul(GrowthRate::exp(1.0, 1.0)).mul(GrowthRate::poly(-1.0));
        assert!(!h.summable());
        assert!(GrowthRate::poly(-1.5).summable());
    }

    proptest! {
        #[test]
        fn e_monotone_in_lambda(l1 in 0.05f64..5.0, dl in 0.01f64..5.0, n in 2usize..8) {
            let x = ints(n);
            let (_, p1) = build_cost(&CostSpec::bounded_metric(1.5), &x, &x, l1).unwrap();
            let (_, p2) = build_cost(&CostSpec::bounded_metric(1.5), &x, &x, l1 + dl).unwrap();
            for (a, b) in p1.e_x.values.iter().zip(&p2.e_x.values) {
                prop_assert!(b <= a);
                prop_assert!(*b >= 1.0);
            }
        }

        #[test]
        fn bounded_sandwich_random_tables(v in prop::collection::vec(-3.0f64..3.0, 12)) {
            let table: Vec<Vec<f64>> = v.chunks(4).map(|c| c.to_vec()).collect();
            let spec = CostSpec::Bounded { base: BoundedBase::Table { table } };
            let (m, p) = build_cost(&spec, &ints(3), &ints(4), 0.7).unwrap();
            prop_assert!(m.primary.max_violation(&m.cost) <= 0.0);
            prop_assert!(p.c_x.values.iter().all(|&c| c >= 1.0));
        }

        #[test]
        fn plan_pass_implies_value_pass(q in 0.1f64..0.9, n in 5usize..40) {
            let r = geom(q, n);
            let sp = r.space().clone();
            let (_, p) = build_cost(&CostSpec::discrete(), &sp, &sp, 1.0).unwrap();
            let plan = check_plan_conditions(&r, &r, &p, SampleMode::OneSampleR);
            let value = check_value_conditions(&r, &r, &p, SampleMode::OneSampleR);
            if plan.verdict == Verdict::Pass {
                prop_assert_eq!(value.verdict, Verdict::Pass);
            }
        }
    }
}
