//! Weighted empirical measures over `R^d`.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// An `N x d` particle cloud with simplex weights and optional class labels.
///
/// An empty batch (`N = 0`) is allowed and carries no weights; every other
/// batch has strictly positive weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleBatch {
    positions: Array2<f64>,
    weights: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl ParticleBatch {
    /// Uniformly weighted batch.
    pub fn uniform(positions: Array2<f64>) -> Result<Self> {
        let n = positions.nrows();
        let weights = vec![1.0 / n as f64; n];
        Self::with_weights(positions, weights)
    }

    pub fn with_weights(positions: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = positions.nrows();
        if weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} particles",
                weights.len(),
                n
            )));
        }
        if let Some(bad) = positions.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite particle coordinate {bad}")));
        }
        if n > 0 {
            if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
                return Err(Error::InvalidInput(format!(
                    "weight {i} = {w} is not strictly positive"
                )));
            }
            let total = compensated_sum(&weights);
            if (total - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidInput(format!("weights sum to {total}, expected 1")));
            }
        }
        Ok(Self {
            positions,
            weights,
            labels: None,
        })
    }

    /// Builds a batch from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let positions =
            Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::uniform(positions)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            positions: Array2::zeros((0, dim)),
            weights: Vec::new(),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} particles",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn positions(&self) -> ArrayView2<'_, f64> {
        self.positions.view()
    }

    pub fn into_positions(self) -> Array2<f64> {
        self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.positions.row(i)
    }

    /// True when every weight equals `1/N` exactly.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| x == w)
    }

    /// Same weights and labels, new positions (e.g. after an Euler step).
    pub fn with_positions(&self, positions: Array2<f64>) -> Result<Self> {
        if positions.dim() != self.positions.dim() {
            return Err(Error::DimensionMismatch(format!(
                "positions {:?} vs batch {:?}",
                positions.dim(),
                self.positions.dim()
            )));
        }
        if let Some(bad) = positions.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite particle coordinate {bad}")));
        }
        Ok(Self {
            positions,
            weights: self.weights.clone(),
            labels: self.labels.clone(),
        })
    }

    /// Sub-batch of the given rows, weights renormalised to the simplex.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let positions = self.positions.select(Axis(0), rows);
        let mass: f64 = rows.iter().map(|&i| self.weights[i]).sum();
        let weights = rows.iter().map(|&i| self.weights[i] / mass).collect();
        let mut out = Self::with_weights_unchecked_sum(positions, weights);
        out.labels = self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect());
        Ok(out)
    }

    /// Mixture of two batches with total masses `mass_a` and `1 - mass_a`.
    pub fn concat_weighted(a: &Self, b: &Self, mass_a: f64) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot concatenate d={} with d={}",
                a.dim(),
                b.dim()
            )));
        }
        if !(0.0..=1.0).contains(&mass_a) {
            return Err(Error::InvalidInput(format!("mass {mass_a} outside [0,1]")));
        }
        let mut positions = Array2::zeros((a.len() + b.len(), a.dim()));
        positions.slice_mut(s![..a.len(), ..]).assign(&a.positions);
        positions.slice_mut(s![a.len().., ..]).assign(&b.positions);
        let weights = a
            .weights
            .iter()
            .map(|w| w * mass_a)
            .chain(b.weights.iter().map(|w| w * (1.0 - mass_a)))
            .collect();
        Ok(Self::with_weights_unchecked_sum(positions, weights))
    }

    /// Weighted mean of the particle positions.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (row, w) in self.positions.outer_iter().zip(&self.weights) {
            for (acc, x) in m.iter_mut().zip(row) {
                *acc += w * x;
            }
        }
        m
    }

    /// Weighted (biased, `1/N`-normalised) covariance.
    pub fn covariance(&self) -> Array2<f64> {
        let d = self.dim();
        let m = self.mean();
        let mut c = Array2::zeros((d, d));
        for (row, w) in self.positions.outer_iter().zip(&self.weights) {
            for a in 0..d {
                let da = row[a] - m[a];
                for b in 0..d {
                    c[[a, b]] += w * da * (row[b] - m[b]);
                }
            }
        }
        c
    }

    /// Largest particle norm, `max_i |x_i|`.
    pub fn support_radius(&self) -> f64 {
        self.positions
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }

    // Entries are positive by construction; only fix the sum within tolerance.
    fn with_weights_unchecked_sum(positions: Array2<f64>, mut weights: Vec<f64>) -> Self {
        let total = compensated_sum(&weights);
        if total > 0.0 && (total - 1.0).abs() > WEIGHT_SUM_TOL {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Self {
            positions,
            weights,
            labels: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_bad_weights() {
        let p = array![[0.0], [1.0]];
        assert!(ParticleBatch::with_weights(p.clone(), vec![0.5, 0.4]).is_err());
        assert!(ParticleBatch::with_weights(p.clone(), vec![1.0, 0.0]).is_err());
        assert!(ParticleBatch::with_weights(p, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn rejects_non_finite_positions() {
        assert!(ParticleBatch::uniform(array![[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn label_length_checked() {
        let b = ParticleBatch::uniform(array![[0.0], [1.0]]).unwrap();
        assert!(b.clone().with_labels(vec![0]).is_err());
        assert_eq!(b.with_labels(vec![0, 1]).unwrap().labels(), Some(&[0, 1][..]));
    }

    #[test]
    fn weighted_concat_masses() {
        let a = ParticleBatch::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = ParticleBatch::from_rows(&[vec![5.0]]).unwrap();
        let c = ParticleBatch::concat_weighted(&a, &b, 0.5).unwrap();
        assert_eq!(c.weights(), &[0.25, 0.25, 0.5]);
    }

    #[test]
    fn moments() {
        let b = ParticleBatch::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(b.mean(), vec![0.0, 0.0]);
        assert_eq!(b.covariance(), array![[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(b.support_radius(), 1.0);
    }
}
