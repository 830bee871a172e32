//! Indexed spaces, probability measures and signed perturbations.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a validated measure.
pub const MASS_TOL: f64 = 1e-12;
/// Largest deviation that [`validate_measure`] silently renormalises.
pub const RENORM_TOL: f64 = 1e-9;
/// Tail mass left out when a countable family is truncated.
pub const TRUNCATION_TAIL: f64 = 1e-12;
/// Hard cap on generated truncations.
pub const MAX_ATOMS: usize = 1_000_000;

/// Finite, ordered enumeration of atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedSpace {
    labels: Vec<String>,
    coords: Option<Vec<Vec<f64>>>,
}

impl IndexedSpace {
    pub fn new(labels: Vec<String>, coords: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptySpace);
        }
        let mut seen = std::collections::HashSet::with_capacity(labels.len());
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        if let Some(c) = &coords {
            if c.len() != labels.len() {
                return Err(Error::LengthMismatch {
                    expected: labels.len(),
                    got: c.len(),
                });
            }
            let dim = c[0].len();
            if c.iter().any(|v| v.len() != dim) {
                return Err(Error::Parse("coordinates have mixed dimensions".into()));
            }
        }
        Ok(IndexedSpace { labels, coords })
    }

    /// Space `{0, 1, ..., n-1}` with one-dimensional coordinates equal to the index.
    pub fn integers(n: usize) -> Result<Self> {
        Self::from_points((0..n).map(|i| i as f64).collect())
    }

    /// One-dimensional points labelled by their value.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        let labels = points.iter().map(|p| format_label(*p)).collect();
        let coords = points.into_iter().map(|p| vec![p]).collect();
        Self::new(labels, Some(coords))
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    /// Keeps the atoms listed in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let labels = idx.iter().map(|&i| self.labels[i].clone()).collect();
        let coords = self
            .coords
            .as_ref()
            .map(|c| idx.iter().map(|&i| c[i].clone()).collect());
        Self::new(labels, coords)
    }
}

fn format_label(p: f64) -> String {
    if p.fract() == 0.0 && p.abs() < 1e15 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

/// Asymptotic tail of a countable measure in terms of the distance `d` of an
/// atom to the cost anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailModel {
    /// Support is genuinely finite.
    Finite,
    /// `r ∝ q^d`.
    Geometric { q: f64 },
    /// `r ∝ (1+d)^(-a)`.
    Polynomial { a: f64 },
    /// `r ∝ exp(-gamma d^theta)`.
    SubWeibull { gamma: f64, theta: f64 },
    /// No analytic description.
    Unknown,
}

/// Tail information attached to a measure. `shell_degree` is the exponent `k`
/// in `#{atoms with n-1 <= d < n} = O(n^k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tail {
    pub model: TailModel,
    #[serde(default)]
    pub shell_degree: f64,
}

impl Default for Tail {
    fn default() -> Self {
        Tail {
            model: TailModel::Unknown,
            shell_degree: 0.0,
        }
    }
}

impl Tail {
    pub fn finite() -> Self {
        Tail {
            model: TailModel::Finite,
            shell_degree: 0.0,
        }
    }

    pub fn new(model: TailModel) -> Self {
        Tail {
            model,
            shell_degree: 0.0,
        }
    }
}

/// Probability vector on an [`IndexedSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    space: Arc<IndexedSpace>,
    weights: Vec<f64>,
    tail: Tail,
}

impl DiscreteMeasure {
    pub fn space(&self) -> &Arc<IndexedSpace> {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn tail(&self) -> Tail {
        self.tail
    }

    pub fn with_tail(mut self, tail: Tail) -> Self {
        self.tail = tail;
        self
    }

    /// Indices of atoms with positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    /// `Σ f_x r_x`.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    /// `Var_{X~r}[f_X]`, computed with a centred second pass.
    pub fn variance(&self, f: &[f64]) -> f64 {
        let mean = self.expect(f);
        let v: f64 = self
            .weights
            .iter()
            .zip(f)
            .map(|(w, x)| w * (x - mean) * (x - mean))
            .sum();
        v.max(0.0)
    }

    pub fn same_space(&self, other: &DiscreteMeasure) -> bool {
        Arc::ptr_eq(&self.space, &other.space) || *self.space == *other.space
    }

    /// Shannon entropy with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }
}

/// Checks nonnegativity and unit mass, renormalising deviations up to
/// [`RENORM_TOL`] when `renormalize` is set.
pub fn validate_measure(
    weights: Vec<f64>,
    space: Arc<IndexedSpace>,
    renormalize: bool,
) -> Result<DiscreteMeasure> {
    if weights.len() != space.size() {
        return Err(Error::LengthMismatch {
            expected: space.size(),
            got: weights.len(),
        });
    }
    for (index, &value) in weights.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    let sum: f64 = weights.iter().sum();
    let dev = (sum - 1.0).abs();
    let weights = if dev <= MASS_TOL {
        weights
    } else if renormalize && dev <= RENORM_TOL {
        weights.into_iter().map(|w| w / sum).collect()
    } else {
        return Err(Error::MassMismatch { sum });
    };
    Ok(DiscreteMeasure {
        space,
        weights,
        tail: Tail::default(),
    })
}

/// Vector on a space, typically a perturbation `h` of a measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedVector {
    space: Arc<IndexedSpace>,
    entries: Vec<f64>,
    sums_to_zero: bool,
}

impl SignedVector {
    pub fn new(space: Arc<IndexedSpace>, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != space.size() {
            return Err(Error::LengthMismatch {
                expected: space.size(),
                got: entries.len(),
            });
        }
        Ok(SignedVector {
            space,
            entries,
            sums_to_zero: false,
        })
    }

    /// Tangent vector; the entries must sum to zero within [`MASS_TOL`].
    pub fn tangent(space: Arc<IndexedSpace>, entries: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(space, entries)?;
        let s: f64 = v.entries.iter().sum();
        if s.abs() > MASS_TOL {
            return Err(Error::NotInTangentCone { sum_x: s, sum_y: 0.0 });
        }
        v.sums_to_zero = true;
        Ok(v)
    }

    /// `b - a` for two measures on the same space.
    pub fn difference(b: &DiscreteMeasure, a: &DiscreteMeasure) -> Result<Self> {
        if !a.same_space(b) {
            return Err(Error::SpaceMismatch);
        }
        let entries = b.weights.iter().zip(&a.weights).map(|(x, y)| x - y).collect();
        Ok(SignedVector {
            space: a.space.clone(),
            entries,
            sums_to_zero: true,
        })
    }

    pub fn space(&self) -> &Arc<IndexedSpace> {
        &self.space
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn sums_to_zero(&self) -> bool {
        self.sums_to_zero
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().sum()
    }
}

/// Pointwise weights of a weighted ℓ¹ norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightFunction {
    pub values: Vec<f64>,
}

impl WeightFunction {
    pub fn new(values: Vec<f64>) -> Self {
        WeightFunction { values }
    }

    pub fn ones(n: usize) -> Self {
        WeightFunction { values: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn powf(&self, e: f64) -> Self {
        WeightFunction::new(self.values.iter().map(|v| v.powf(e)).collect())
    }

    pub fn mul(&self, other: &WeightFunction) -> Self {
        WeightFunction::new(self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect())
    }
}

/// `Σ w_x |a_x|`.
pub fn weighted_l1_norm(a: &SignedVector, w: &WeightFunction) -> Result<f64> {
    if a.entries.len() != w.values.len() {
        return Err(Error::SpaceMismatch);
    }
    Ok(a.entries.iter().zip(&w.values).map(|(x, w)| w * x.abs()).sum())
}

/// Finite-support approximation of order `l`: entries `2..=l` are kept, the
/// mass of atoms beyond `l` moves to the first atom.
pub fn truncate_signed(h: &SignedVector, l: usize) -> Result<SignedVector> {
    let n = h.entries.len();
    if l < 2 || l > n {
        return Err(Error::OrderOutOfRange { order: l, size: n });
    }
    let mut out = vec![0.0; n];
    out[1..l].copy_from_slice(&h.entries[1..l]);
    let tail: f64 = h.entries[l..].iter().sum();
    out[0] = h.entries[0] + tail;
    Ok(SignedVector {
        space: h.space.clone(),
        entries: out,
        sums_to_zero: h.sums_to_zero,
    })
}

/// `min(H(r), H(s))`.
pub fn entropy_pair(r: &DiscreteMeasure, s: &DiscreteMeasure) -> f64 {
    r.entropy().min(s.entropy())
}

/// Empirical measure `(1/n) Σ δ_{X_i}`.
pub fn empirical_measure(sample: &[usize], space: Arc<IndexedSpace>) -> Result<DiscreteMeasure> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut counts = vec![0usize; space.size()];
    for &i in sample {
        if i >= counts.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: counts.len(),
            });
        }
        counts[i] += 1;
    }
    Ok(empirical_from_counts(&counts, space))
}

pub(crate) fn empirical_from_counts(counts: &[usize], space: Arc<IndexedSpace>) -> DiscreteMeasure {
    let n: usize = counts.iter().sum();
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    DiscreteMeasure {
        space,
        weights,
        tail: Tail::default(),
    }
}

/// Generator for the parametric measure families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MeasureSpec {
    /// `r_x ∝ q^x`.
    Geometric {
        q: f64,
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        finite: bool,
    },
    /// `r_x ∝ (1+x)^(-a)`.
    Polynomial {
        a: f64,
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        finite: bool,
    },
    /// `r_x ∝ exp(-gamma x^theta)`.
    SubWeibull {
        gamma: f64,
        theta: f64,
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        finite: bool,
    },
    Uniform { size: usize },
    Explicit {
        weights: Vec<f64>,
        #[serde(default)]
        labels: Option<Vec<String>>,
        #[serde(default)]
        coords: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        tail: Option<Tail>,
    },
}

impl MeasureSpec {
    /// Builds the measure on atoms `0, 1, 2, ...`.
    ///
    /// With `finite` set the family is normalised on `size` atoms and treated as
    /// finitely supported. Otherwise the truncation is `size` atoms if given, or
    /// else the shortest one leaving tail mass below [`TRUNCATION_TAIL`]; the
    /// dropped tail is added to the last atom.
    pub fn build(&self) -> Result<DiscreteMeasure> {
        let (density, size, finite, model): (Box<dyn Fn(f64) -> f64>, _, _, _) = match *self {
            MeasureSpec::Geometric { q, size, finite } => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::InvalidFamilyParams(format!("geometric q={q}")));
                }
                (Box::new(move |x| q.powf(x)), size, finite, TailModel::Geometric { q })
            }
            MeasureSpec::Polynomial { a, size, finite } => {
                if !(a > 1.0) {
                    return Err(Error::InvalidFamilyParams(format!("polynomial a={a} must exceed 1")));
                }
                (
                    Box::new(move |x| (1.0 + x).powf(-a)),
                    size,
                    finite,
                    TailModel::Polynomial { a },
                )
            }
            MeasureSpec::SubWeibull {
                gamma,
                theta,
                size,
                finite,
            } => {
                if !(gamma > 0.0 && theta > 0.0) {
                    return Err(Error::InvalidFamilyParams(format!(
                        "sub_weibull gamma={gamma} theta={theta}"
                    )));
                }
                (
                    Box::new(move |x: f64| (-gamma * x.powf(theta)).exp()),
                    size,
                    finite,
                    TailModel::SubWeibull { gamma, theta },
                )
            }
            MeasureSpec::Uniform { size } => {
                if size == 0 {
                    return Err(Error::EmptySpace);
                }
                let space = Arc::new(IndexedSpace::integers(size)?);
                let m = validate_measure(vec![1.0 / size as f64; size], space, true)?;
                return Ok(m.with_tail(Tail::finite()));
            }
            MeasureSpec::Explicit {
                ref weights,
                ref labels,
                ref coords,
                tail,
            } => {
                let labels = labels
                    .clone()
                    .unwrap_or_else(|| (0..weights.len()).map(|i| i.to_string()).collect());
                let coords = coords
                    .clone()
                    .or_else(|| Some((0..weights.len()).map(|i| vec![i as f64]).collect()));
                let space = Arc::new(IndexedSpace::new(labels, coords)?);
                let m = validate_measure(weights.clone(), space, true)?;
                return Ok(m.with_tail(tail.unwrap_or_else(Tail::finite)));
            }
        };
        if finite {
            let n = size.ok_or_else(|| Error::InvalidFamilyParams("finite family needs size".into()))?;
            if n == 0 {
                return Err(Error::EmptySpace);
            }
            let raw: Vec<f64> = (0..n).map(|i| density(i as f64)).collect();
            let total: f64 = raw.iter().sum();
            let space = Arc::new(IndexedSpace::integers(n)?);
            let m = validate_measure(raw.into_iter().map(|w| w / total).collect(), space, true)?;
            return Ok(m.with_tail(Tail::finite()));
        }
        let total = family_total(&*density, &model);
        let n = match size {
            Some(n) if n > 0 => n,
            Some(_) => return Err(Error::EmptySpace),
            None => {
                let mut acc = 0.0;
                let mut n = 0;
                while n < MAX_ATOMS {
                    acc += density(n as f64) / total;
                    n += 1;
                    if 1.0 - acc < TRUNCATION_TAIL {
                        break;
                    }
                }
                n
            }
        };
        let mut w: Vec<f64> = (0..n).map(|i| density(i as f64) / total).collect();
        let kept: f64 = w.iter().sum();
        w[n - 1] += (1.0 - kept).max(0.0);
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        let space = Arc::new(IndexedSpace::integers(n)?);
        Ok(validate_measure(w, space, true)?.with_tail(Tail::new(model)))
    }
}

fn family_total(density: &dyn Fn(f64) -> f64, model: &TailModel) -> f64 {
    match *model {
        TailModel::Geometric { q } => 1.0 / (1.0 - q),
        _ => {
            // Direct summation, then an integral bound on the remainder.
            let mut acc = 0.0;
            let mut i = 0usize;
            loop {
                let d = density(i as f64);
                acc += d;
                i += 1;
                if d < 1e-17 * acc || i >= 50 * MAX_ATOMS {
                    break;
                }
            }
            if let TailModel::Polynomial { a } = *model {
                acc += (1.0 + i as f64).powf(1.0 - a) / (a - 1.0);
            }
            acc
        }
    }
}

#[derive(Deserialize)]
struct MeasureFile {
    #[serde(default)]
    labels: Option<Vec<String>>,
    weights: Vec<f64>,
    #[serde(default)]
    coords: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    tail: Option<Tail>,
}

/// Reads a measure from JSON (`{"labels","weights","coords","tail"}` or a
/// [`MeasureSpec`] with a `family` key) or CSV (`label,weight,coord...`).
pub fn load_measure(path: &Path) -> Result<DiscreteMeasure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or_else(|| text.trim_start().starts_with('{'));
    if is_json {
        parse_measure_json(&text)
    } else {
        parse_measure_csv(&text)
    }
}

pub fn parse_measure_json(text: &str) -> Result<DiscreteMeasure> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if value.get("family").is_some() {
        let spec: MeasureSpec = serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
        return spec.build();
    }
    let f: MeasureFile = serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
    let labels = f
        .labels
        .unwrap_or_else(|| (0..f.weights.len()).map(|i| i.to_string()).collect());
    let space = Arc::new(IndexedSpace::new(labels, f.coords)?);
    Ok(validate_measure(f.weights, space, true)?.with_tail(f.tail.unwrap_or_default()))
}

pub fn parse_measure_csv(text: &str) -> Result<DiscreteMeasure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let mut coords: Vec<Vec<f64>> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() < 2 {
            return Err(Error::Parse(format!("row {row}: expected label,weight")));
        }
        let w: f64 = match rec[1].parse() {
            Ok(w) => w,
            Err(_) if row == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("row {row}: {e}"))),
        };
        labels.push(rec[0].to_string());
        weights.push(w);
        let c = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("row {row}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        coords.push(c);
    }
    let coords = if coords.iter().all(|c| c.is_empty()) {
        None
    } else {
        Some(coords)
    };
    let space = Arc::new(IndexedSpace::new(labels, coords)?);
    validate_measure(weights, space, true)
}

/// Reference pair used throughout the test-suite: `r = s` geometric with
/// `q = 0.7` normalised on `{0, ..., 20}`.
pub fn reference_measure() -> DiscreteMeasure {
    MeasureSpec::Geometric {
        q: 0.7,
        size: Some(21),
        finite: true,
    }
    .build()
    .expect("reference measure")
}
