//! ZCA whitening fitted on flattened, unit-scaled images.

use nalgebra::{DMatrix, SymmetricEigen};

use super::cifar::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::tensor::matmul_into;

/// Default regularizer on unit-scaled data.
pub const DEFAULT_ZCA_EPS: f64 = 0.1;

/// `z = (x − mean)·W` with `W = E·diag((λ + ε)^(−1/2))·Eᵀ`.
#[derive(Clone, Debug)]
pub struct ZcaTransform {
    pub dim: usize,
    pub eps: f64,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, symmetric.
    pub whitening: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Row-major `dim × dim`; column `j` is the eigenvector of `eigenvalues[j]`.
    pub eigenvectors: Vec<f64>,
}

impl ZcaTransform {
    /// Fits on `n` row vectors of length `dim` stored contiguously.
    pub fn fit(data: &[f64], n: usize, dim: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("ZCA epsilon must be positive, got {eps}")));
        }
        if n == 0 || data.len() != n * dim {
            return Err(Error::dim(format!("ZCA fit got {} values for {n}×{dim}", data.len())));
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = data
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        let mut cov = vec![0.0; dim * dim];
        matmul_into(&centered, true, &centered, false, &mut cov, dim, n, dim, false);
        let inv_n = 1.0 / n as f64;
        let mut sym = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                sym[(i, j)] = 0.5 * (cov[i * dim + j] + cov[j * dim + i]) * inv_n;
            }
        }
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs())).max(1e-300);
        if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-9 * scale.max(1.0)) {
            return Err(Error::Numeric(format!("covariance is not PSD (eigenvalue {bad:e})")));
        }
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let mut eigenvectors = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                eigenvectors[i * dim + j] = eig.eigenvectors[(i, j)];
            }
        }
        let whitening = spectral(&eigenvectors, &eigenvalues, dim, |l| (l + eps).powf(-0.5));
        Ok(Self {
            dim,
            eps,
            mean,
            whitening,
            eigenvalues,
            eigenvectors,
        })
    }

    /// Whitens `n` row vectors.
    pub fn apply(&self, data: &[f64]) -> Result<Vec<f64>> {
        let n = self.rows(data)?;
        let centered: Vec<f64> = data
            .chunks_exact(self.dim)
            .flat_map(|row| row.iter().zip(&self.mean).map(|(v, m)| v - m))
            .collect();
        let mut out = vec![0.0; data.len()];
        matmul_into(&centered, false, &self.whitening, false, &mut out, n, self.dim, self.dim, false);
        Ok(out)
    }

    /// Maps whitened rows back to input space.
    pub fn invert(&self, whitened: &[f64]) -> Result<Vec<f64>> {
        let n = self.rows(whitened)?;
        let coloring = spectral(&self.eigenvectors, &self.eigenvalues, self.dim, |l| {
            (l + self.eps).sqrt()
        });
        let mut out = vec![0.0; whitened.len()];
        matmul_into(whitened, false, &coloring, false, &mut out, n, self.dim, self.dim, false);
        for row in out.chunks_exact_mut(self.dim) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        Ok(out)
    }

    fn rows(&self, data: &[f64]) -> Result<usize> {
        if data.len() % self.dim != 0 {
            return Err(Error::dim(format!(
                "{} values are not a whole number of {}-vectors",
                data.len(),
                self.dim
            )));
        }
        Ok(data.len() / self.dim)
    }
}

/// `E·diag(f(λ))·Eᵀ`, row-major.
fn spectral(vectors: &[f64], values: &[f64], dim: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let scaled: Vec<f64> = vectors
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(values).map(|(v, &l)| v * f(l)).collect::<Vec<_>>())
        .collect();
    let mut out = vec![0.0; dim * dim];
    matmul_into(&scaled, false, vectors, true, &mut out, dim, dim, dim, false);
    out
}

/// Fits on all images of `dataset` (unit-scaled, flattened `C·H·W`).
pub fn zca_fit(dataset: &LabeledDataset, eps: f64) -> Result<ZcaTransform> {
    ZcaTransform::fit(&dataset.to_unit(), dataset.len(), dataset.image_len(), eps)
}

pub fn zca_apply(transform: &ZcaTransform, images: &[f64]) -> Result<Vec<f64>> {
    transform.apply(images)
}
