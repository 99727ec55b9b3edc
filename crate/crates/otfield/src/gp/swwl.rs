//! Sliced-Wasserstein embedding of node point clouds: random unit
//! projections, sorted quantiles per projection, one flat vector per
//! graph. Euclidean distance between two embeddings estimates the
//! sliced 2-Wasserstein distance between the underlying clouds.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WlFeatures;
use crate::ot::EmpiricalMeasure;

/// Embedding knobs shared by every graph in one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwwlConfig {
    pub n_projections: usize,
    pub n_quantiles: usize,
    pub seed: u64,
}

impl Default for SwwlConfig {
    fn default() -> Self {
        Self {
            n_projections: 50,
            n_quantiles: 500,
            seed: 0,
        }
    }
}

/// Frozen projection directions for one input dimension. All embeddings
/// compared against each other must come from the same spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SwwlSpec {
    config: SwwlConfig,
    input_dim: usize,
    /// `input_dim x n_projections`, unit columns.
    projections: DMatrix<f64>,
}

impl SwwlSpec {
    /// Draw the projection directions from a seeded generator. The same
    /// `(config, input_dim)` always yields the same directions, which is
    /// what lets archives store the seed instead of the matrix.
    pub fn new(config: SwwlConfig, input_dim: usize) -> Result<Self> {
        if config.n_projections == 0 {
            return Err(Error::InvalidParameter(
                "need at least one projection".into(),
            ));
        }
        if config.n_quantiles < 2 {
            return Err(Error::InvalidParameter(
                "need at least two quantile levels".into(),
            ));
        }
        if input_dim == 0 {
            return Err(Error::InvalidParameter(
                "embedding input dimension must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut projections = DMatrix::zeros(input_dim, config.n_projections);
        for p in 0..config.n_projections {
            let mut norm_sq = 0.0;
            for c in 0..input_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                projections[(c, p)] = z;
                norm_sq += z * z;
            }
            if norm_sq == 0.0 {
                projections[(0, p)] = 1.0;
                norm_sq = 1.0;
            }
            let inv = 1.0 / norm_sq.sqrt();
            for c in 0..input_dim {
                projections[(c, p)] *= inv;
            }
        }
        Ok(Self {
            config,
            input_dim,
            projections,
        })
    }

    /// Build a spec with caller-chosen directions (columns are normalized).
    /// Used when a test pins the projection axis.
    #[cfg(test)]
    pub(crate) fn from_projections(projections: DMatrix<f64>, n_quantiles: usize) -> Self {
        let mut projections = projections;
        for mut col in projections.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        Self {
            config: SwwlConfig {
                n_projections: projections.ncols(),
                n_quantiles,
                seed: 0,
            },
            input_dim: projections.nrows(),
            projections,
        }
    }

    pub fn config(&self) -> &SwwlConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.n_projections * self.config.n_quantiles
    }

    /// Embed a point cloud given as one row per point.
    pub fn embed_points(&self, points: &DMatrix<f64>) -> Result<SwwlEmbedding> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "cannot embed an empty point cloud".into(),
            ));
        }
        if points.ncols() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "points have dimension {} but the embedding spec expects {}",
                points.ncols(),
                self.input_dim
            )));
        }
        let np = self.config.n_projections;
        let nq = self.config.n_quantiles;
        let scale = 1.0 / ((np * nq) as f64).sqrt();
        let mut values = DVector::zeros(np * nq);
        let mut projected = vec![0.0f64; n];
        for p in 0..np {
            for i in 0..n {
                let mut z = 0.0;
                for c in 0..self.input_dim {
                    z += points[(i, c)] * self.projections[(c, p)];
                }
                projected[i] = z;
            }
            projected.sort_by(f64::total_cmp);
            for k in 0..nq {
                // Level k/(nq-1) lands at fractional order statistic
                // t*(n-1); linear interpolation between neighbors.
                let pos = (k as f64) * (n - 1) as f64 / (nq - 1) as f64;
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                let q = if frac == 0.0 || lo + 1 >= n {
                    projected[lo.min(n - 1)]
                } else {
                    projected[lo] + frac * (projected[lo + 1] - projected[lo])
                };
                values[p * nq + k] = scale * q;
            }
        }
        Ok(SwwlEmbedding { values })
    }

    pub fn embed(&self, wl: &WlFeatures) -> Result<SwwlEmbedding> {
        self.embed_points(wl.values())
    }

    pub fn embed_measure(&self, measure: &EmpiricalMeasure) -> Result<SwwlEmbedding> {
        self.embed_points(measure.support())
    }
}

/// One graph's flat quantile vector, already scaled so that squared
/// Euclidean distance between embeddings estimates squared sliced W2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwwlEmbedding {
    values: DVector<f64>,
}

impl SwwlEmbedding {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn distance_squared(&self, other: &SwwlEmbedding) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "embeddings have different lengths ({} vs {})",
                self.len(),
                other.len()
            )));
        }
        Ok((&self.values - &other.values).norm_squared())
    }
}
