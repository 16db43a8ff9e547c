//! Personalized dimensionality reduction (PCA).
//!
//! Fitted once on the accumulated embeddings; afterwards every incoming
//! embedding is projected in constant time.

use std::ops::Deref;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::params::ParamContainer;

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedEmbedding(pub Vec<f64>);

impl Deref for ReducedEmbedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ReducedEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ReducedEmbedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducerModel {
    pub mean: Vec<f64>,
    /// Row-major `(input_dim, out_dim)`; column `k` is the k-th component.
    pub components: Vec<f64>,
    /// Eigenvalues of the selected components, descending.
    pub variances: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
    pub out_dim: usize,
}

impl ReducerModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.input_dim()).map(|i| self.components[i * self.out_dim + k]).collect()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Minimum number of samples `fit` accepts for a given output size.
    pub fn min_samples(out_dim: usize) -> usize {
        out_dim + 1
    }

    /// Fit PCA: top-`out_dim` eigenvectors of the unbiased sample covariance,
    /// descending eigenvalue order, each signed so its largest-magnitude
    /// coordinate is positive.
    pub fn fit(embeddings: &[Embedding], out_dim: usize) -> Result<Self> {
        if out_dim == 0 {
            return Err(Error::Config("reducer out_dim must be >= 1".into()));
        }
        let n = embeddings.len();
        if n < Self::min_samples(out_dim) {
            return Err(Error::Data(format!("PCA with {out_dim} components needs at least {} samples, got {n}", out_dim + 1)));
        }
        let dim = embeddings[0].len();
        if out_dim > dim {
            return Err(Error::Config(format!("out_dim {out_dim} exceeds input dimension {dim}")));
        }
        if let Some(e) = embeddings.iter().find(|e| e.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: e.len() });
        }
        if embeddings.iter().any(|e| e.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("non-finite embedding value".into()));
        }

        let mut mean = vec![0.0; dim];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(e.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for e in embeddings {
            for ((c, v), m) in centered.iter_mut().zip(e.iter()).zip(&mean) {
                *c = v - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        // descending eigenvalue, index as tie-break for determinism
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

        let mut components = vec![0.0; dim * out_dim];
        let mut variances = Vec::with_capacity(out_dim);
        for (k, &col) in order.iter().take(out_dim).enumerate() {
            let v = eig.eigenvectors.column(col);
            let pivot = (0..dim).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..dim {
                components[i * out_dim + k] = sign * v[i];
            }
            variances.push(eig.eigenvalues[col].max(0.0));
        }
        Ok(Self { mean, components, variances, total_variance, out_dim })
    }

    /// `(embedding - mean) · components`
    pub fn transform(&self, embedding: &[f64]) -> Result<ReducedEmbedding> {
        let dim = self.input_dim();
        if embedding.len() != dim {
            return Err(Error::Dimension { expected: dim, got: embedding.len() });
        }
        let mut out = vec![0.0; self.out_dim];
        for i in 0..dim {
            let c = embedding[i] - self.mean[i];
            let row = &self.components[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
        Ok(ReducedEmbedding(out))
    }

    /// Map a reduced vector back to input space.
    pub fn inverse_transform(&self, reduced: &[f64]) -> Result<Vec<f64>> {
        if reduced.len() != self.out_dim {
            return Err(Error::Dimension { expected: self.out_dim, got: reduced.len() });
        }
        Ok((0..self.input_dim())
            .map(|i| {
                let row = &self.components[i * self.out_dim..(i + 1) * self.out_dim];
                self.mean[i] + row.iter().zip(reduced).map(|(w, r)| w * r).sum::<f64>()
            })
            .collect())
    }

    pub fn to_container(&self) -> ParamContainer {
        let mut c = ParamContainer::new("reducer").with_meta("reducer.method", "pca").with_meta("reducer.out_dim", self.out_dim);
        c.meta.push(("reducer.total_variance".into(), format!("{:e}", self.total_variance)));
        c.push("reducer.mean", vec![self.input_dim()], &self.mean);
        c.push("reducer.components", vec![self.input_dim(), self.out_dim], &self.components);
        c.push("reducer.variances", vec![self.out_dim], &self.variances);
        c
    }

    pub fn from_container(c: &ParamContainer) -> Result<Self> {
        c.expect_kind("reducer")?;
        let out_dim: usize = c.require_meta("reducer.out_dim")?.parse().map_err(|_| Error::Format("bad out_dim".into()))?;
        let total_variance = c.require_meta("reducer.total_variance")?.parse().map_err(|_| Error::Format("bad total variance".into()))?;
        let dim = c
            .tensors
            .iter()
            .find(|t| t.name == "reducer.mean")
            .map(|t| t.data.len())
            .ok_or_else(|| Error::Format("missing tensor 'reducer.mean'".into()))?;
        Ok(Self {
            mean: c.take("reducer.mean", &[dim])?,
            components: c.take("reducer.components", &[dim, out_dim])?,
            variances: c.take("reducer.variances", &[out_dim])?,
            total_variance,
            out_dim,
        })
    }
}
