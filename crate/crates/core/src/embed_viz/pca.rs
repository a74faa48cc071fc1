//! Principal component projection via the symmetric eigendecomposition of the
//! sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `D x k`, columns ordered by descending eigenvalue.
    pub components: Array2<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits the top-`k` principal axes. An infeasible `k` is lowered to
    /// `min(N - 1, D)` with a warning.
    pub fn fit(x: ArrayView2<f64>, k: usize) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::BatchTooSmall { min: 2, got: n });
        }
        let max_k = (n - 1).min(d);
        let k = if k > max_k || k == 0 {
            log::warn!("PCA dimension {k} infeasible for {n}x{d} data, using {max_k}");
            max_k
        } else {
            k
        };
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &x - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Array2::zeros((d, k));
        for (c, &idx) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(idx);
            // Sign convention: the largest-magnitude entry is positive.
            let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                components[[r, c]] = sign * v[r];
            }
        }
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        Ok(Self { mean, components, eigenvalues })
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.components)
    }

    /// Fraction of total variance captured by the retained components.
    pub fn explained_ratio(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let kept: f64 = self.eigenvalues.iter().take(self.components.ncols()).map(|v| v.max(0.0)).sum();
        if total == 0.0 {
            1.0
        } else {
            kept / total
        }
    }
}

pub fn pca_reduce(x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
    Ok(Pca::fit(x, k)?.transform(x))
}
