//! Deterministic numerical kernels shared by every other module:
//! normalization, similarity, softmax, divergences, and a finite-difference
//! gradient oracle. All logarithms are natural (nats).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const UNIT_NORM_TOL: f64 = 1e-6;
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// An L2-normalized embedding. The atom of every formula in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps a vector that is already unit-norm (within 1e-6).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::ZeroNorm { norm: n });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability distribution: non-negative entries summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NonFiniteInput);
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbDist {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A square similarity matrix over a batch. Row index is the text item,
/// column index the audio item; the symmetric direction uses the transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    n: usize,
    data: Vec<f64>, // row-major
}

impl SimMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::ShapeMismatch { left: n, right: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> SimMatrix {
        let mut t = SimMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalizes `v` to unit length, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if n <= ZERO_NORM_THRESHOLD {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Inner product of two unit vectors; lies in [-1, 1].
pub fn cosine_sim(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch { left: u.dim(), right: v.dim() });
    }
    Ok(dot(u.as_slice(), v.as_slice()))
}

/// Entry (i, j) is U[i] . V[j].
pub fn pairwise_sim(u: &[UnitVector], v: &[UnitVector]) -> Result<SimMatrix> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { left: u.len(), right: v.len() });
    }
    let d = u[0].dim();
    for x in u.iter().chain(v.iter()) {
        if x.dim() != d {
            return Err(Error::DimensionMismatch { left: d, right: x.dim() });
        }
    }
    let n = u.len();
    let mut m = SimMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, dot(u[i].as_slice(), v[j].as_slice()));
        }
    }
    Ok(m)
}

/// Max-stabilized softmax at the given temperature.
pub fn softmax(x: &[f64], temperature: f64) -> Result<ProbDist> {
    if temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(ProbDist(exps.into_iter().map(|e| e / z).collect()))
}

/// KL(p || q) in nats, with 0 ln 0 := 0. Zero mass in q under positive mass
/// in p is a hard error rather than a clamp.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { left: p.len(), right: q.len() });
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::SupportViolation { index: i });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Total variation distance: half the L1 distance, in [0, 1].
pub fn total_variation(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { left: p.len(), right: q.len() });
    }
    Ok(0.5 * p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Central-difference gradient oracle for validating analytic gradients.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::StepOutOfRange(h));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation);
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
