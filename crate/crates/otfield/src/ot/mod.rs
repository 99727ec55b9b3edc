//! Entropy-regularized optimal transport between uniform empirical
//! measures, plus the signal transfer operators built on transport plans.

mod oracle;
mod sinkhorn;

pub use oracle::exact_plan_oracle;
pub use sinkhorn::{sinkhorn_plan, SinkhornConfig};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WlFeatures;

/// A uniform empirical measure: `len` points in `dim` dimensions, each
/// carrying mass `1/len`. Rows of `support` are points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    support: DMatrix<f64>,
}

impl EmpiricalMeasure {
    pub fn new(support: DMatrix<f64>) -> Result<Self> {
        if support.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "empirical measure needs at least one support point".into(),
            ));
        }
        if support.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data {
                sample: None,
                message: "measure support contains a non-finite value".into(),
            });
        }
        Ok(Self { support })
    }

    pub fn from_wl(wl: &WlFeatures) -> Self {
        // WL output is validated-graph data, always finite and non-empty.
        Self {
            support: wl.values().clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.support.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    /// Canonical byte encoding used for content-addressed caching.
    pub fn content_bytes(&self) -> Vec<u8> {
        let (n, s) = (self.support.nrows(), self.support.ncols());
        let mut out = Vec::with_capacity(16 + 8 * n * s);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(s as u64).to_le_bytes());
        for r in 0..n {
            for c in 0..s {
                out.extend_from_slice(&self.support[(r, c)].to_bits().to_le_bytes());
            }
        }
        out
    }
}

/// Pairwise squared Euclidean costs between two measures' support points.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    costs: DMatrix<f64>,
}

impl CostMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.costs
    }

    pub fn max(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }

    /// Median of all entries; the usual scale for picking lambda.
    pub fn median(&self) -> f64 {
        crate::util::median(self.costs.as_slice()).unwrap_or(0.0)
    }
}

pub fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<CostMatrix> {
    if mu.dim() != nu.dim() {
        return Err(Error::ShapeMismatch(format!(
            "measures live in different dimensions ({} vs {})",
            mu.dim(),
            nu.dim()
        )));
    }
    let (n, m, s) = (mu.len(), nu.len(), mu.dim());
    let mut costs = DMatrix::zeros(n, m);
    for u in 0..n {
        for v in 0..m {
            let mut acc = 0.0;
            for c in 0..s {
                let d = mu.support[(u, c)] - nu.support[(v, c)];
                acc += d * d;
            }
            costs[(u, v)] = acc;
        }
    }
    Ok(CostMatrix { costs })
}

/// A coupling of two uniform measures: nonnegative `n x m` matrix whose
/// rows sum to `1/n` and columns to `1/m` within `marginal_residual`.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    matrix: DMatrix<f64>,
    lambda: f64,
    marginal_residual: f64,
}

impl TransportPlan {
    pub(crate) fn from_parts(matrix: DMatrix<f64>, lambda: f64, marginal_residual: f64) -> Self {
        Self {
            matrix,
            lambda,
            marginal_residual,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Source-side size (rows).
    pub fn source_len(&self) -> usize {
        self.matrix.nrows()
    }

    /// Target-side size (columns).
    pub fn target_len(&self) -> usize {
        self.matrix.ncols()
    }

    /// Regularization strength the plan was solved with (0 for exact plans).
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn marginal_residual(&self) -> f64 {
        self.marginal_residual
    }

    /// Linear transport cost `<C, P>`.
    pub fn transport_cost(&self, costs: &CostMatrix) -> Result<f64> {
        if costs.values().shape() != self.matrix.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix is {:?} but plan is {:?}",
                costs.values().shape(),
                self.matrix.shape()
            )));
        }
        Ok(self.matrix.dot(costs.values()))
    }

    /// Entropy `-sum P (ln P - 1)` with the convention `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.matrix
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() - 1.0) } else { 0.0 })
            .sum()
    }
}

fn check_source_len(plan: &TransportPlan, len: usize, what: &str) -> Result<()> {
    if plan.source_len() != len {
        return Err(Error::ShapeMismatch(format!(
            "{what} has length {len} but the plan has {} rows",
            plan.source_len()
        )));
    }
    Ok(())
}

/// Push a per-node signal through the plan onto the target support:
/// `T = (m P)^T y`, a weighted average of source values per target atom.
pub fn transfer_signal(plan: &TransportPlan, signal: &DVector<f64>) -> Result<DVector<f64>> {
    check_source_len(plan, signal.len(), "signal")?;
    let m = plan.target_len() as f64;
    Ok(plan.matrix().transpose() * signal * m)
}

/// Pull a target-side signal back to the source nodes: `y~ = (n P) t`.
pub fn back_transfer(plan: &TransportPlan, target_signal: &DVector<f64>) -> Result<DVector<f64>> {
    if plan.target_len() != target_signal.len() {
        return Err(Error::ShapeMismatch(format!(
            "target signal has length {} but the plan has {} columns",
            target_signal.len(),
            plan.target_len()
        )));
    }
    let n = plan.source_len() as f64;
    Ok(plan.matrix() * target_signal * n)
}

/// Pull each column of a target-side matrix back to the source nodes.
pub fn push_forward_columns(plan: &TransportPlan, columns: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if plan.target_len() != columns.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} rows but the plan has {} columns",
            columns.nrows(),
            plan.target_len()
        )));
    }
    let n = plan.source_len() as f64;
    Ok(plan.matrix() * columns * n)
}

/// Push a target-side covariance onto the source nodes:
/// `S_src = (n P) S (n P)^T`. The input must be square and symmetric.
pub fn propagate_covariance(plan: &TransportPlan, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = plan.target_len();
    if cov.nrows() != m || cov.ncols() != m {
        return Err(Error::ShapeMismatch(format!(
            "covariance is {}x{} but the plan has {} columns",
            cov.nrows(),
            cov.ncols(),
            m
        )));
    }
    let scale = cov.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    for i in 0..m {
        for j in (i + 1)..m {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-8 * (1.0 + scale) {
                return Err(Error::Data {
                    sample: None,
                    message: format!(
                        "covariance is asymmetric at ({i},{j}): {} vs {}",
                        cov[(i, j)],
                        cov[(j, i)]
                    ),
                });
            }
        }
    }
    let n = plan.source_len() as f64;
    let scaled = plan.matrix() * n;
    Ok(&scaled * cov * scaled.transpose())
}
