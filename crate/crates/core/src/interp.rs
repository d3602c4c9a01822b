//! K-nearest-neighbour inverse-distance weighting of coefficient matrices
//! over the trained parameter set.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSpace {
    /// Distances between parameters mapped through the training normaliser.
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub p: f64,
    pub exact_match: f64,
    #[serde(default)]
    pub space: DistanceSpace,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5, p: 2.0, exact_match: 1e-12, space: DistanceSpace::Normalized }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Spec("neighbour count must be at least 1".into()));
        }
        if !(self.p > 0.0) {
            return Err(Error::Spec(format!("distance exponent must be positive, got {}", self.p)));
        }
        if !(self.exact_match >= 0.0) {
            return Err(Error::Spec("exact-match threshold must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationResult {
    pub xi: Matrix,
    /// Indices into the trained set, nearest first.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn parameter_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("parameter point", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `w_i = d_i^-p / sum_j d_j^-p`.
pub fn idw_weights(distances: &[f64], p: f64) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::InvalidInput("no distances to weight".into()));
    }
    if let Some(i) = distances.iter().position(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "distance {i} is {}; zero distances must take the exact-match path",
            distances[i]
        )));
    }
    // Scale by the smallest distance so large exponents cannot overflow.
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = distances.iter().map(|&d| (dmin / d).powf(p)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Indices of the `k` nearest points, ties broken by index.
pub fn nearest(query: &[f64], points: &[Vec<f64>], k: usize) -> Result<Vec<(usize, f64)>> {
    let mut d: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| parameter_distance(p, query).map(|v| (i, v)))
        .collect::<Result<_>>()?;
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    Ok(d)
}

/// Interpolate a coefficient matrix at `query` from `(points[i], xis[i])`.
///
/// `points` must be in the same coordinates as `query`; the caller decides
/// whether those are raw or normalised.
pub fn interpolate_coefficients(query: &[f64], points: &[Vec<f64>], xis: &[Matrix], config: &KnnConfig) -> Result<InterpolationResult> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidInput("trained parameter set is empty".into()));
    }
    if points.len() != xis.len() {
        return Err(Error::dim("coefficient matrices", points.len(), xis.len()));
    }
    if let Some(i) = xis.iter().position(|x| x.dim() != xis[0].dim()) {
        return Err(Error::dim(format!("coefficient matrix {i}"), format!("{:?}", xis[0].dim()), format!("{:?}", xis[i].dim())));
    }
    let mut k = config.k;
    if k > points.len() {
        log::warn!("neighbour count {k} exceeds the {} trained points; using all of them", points.len());
        k = points.len();
    }
    let near = nearest(query, points, k)?;
    let (i0, d0) = near[0];
    if d0 <= config.exact_match {
        return Ok(InterpolationResult { xi: xis[i0].clone(), neighbors: vec![i0], weights: vec![1.0] });
    }
    let distances: Vec<f64> = near.iter().map(|&(_, d)| d).collect();
    let weights = idw_weights(&distances, config.p)?;
    let mut xi = Matrix::zeros(xis[0].raw_dim());
    for (&(i, _), &w) in near.iter().zip(&weights) {
        xi.scaled_add(w, &xis[i]);
    }
    Ok(InterpolationResult { xi, neighbors: near.iter().map(|&(i, _)| i).collect(), weights })
}
