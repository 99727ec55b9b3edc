//! Linear dimension reduction of transferred fields: PCA with an
//! explained-variance threshold, a minimum component count, and the
//! analytic map from coefficient uncertainties to field covariances.
//!
//! The stage is exposed as a trait so a nonlinear reducer can plug in
//! later; only PCA ships, selected through the registry by name.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fitted reducer: an affine encoder/decoder pair plus the linear
/// covariance push-forward used for uncertainty quantification.
pub trait DimensionReduction {
    /// Number of latent coefficients Q.
    fn latent_dim(&self) -> usize;
    /// Field length the reducer was fitted on.
    fn field_dim(&self) -> usize;
    fn encode(&self, field: &DVector<f64>) -> Result<DVector<f64>>;
    fn decode(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>>;
    /// Per-point field variances from independent coefficient standard
    /// deviations (the diagonal of the full covariance).
    fn coeff_std_to_field_var_diag(&self, sigmas: &[f64]) -> Result<DVector<f64>>;
    /// Full field covariance from independent coefficient standard
    /// deviations; quadratic in the field length, for small supports.
    fn coeff_std_to_field_cov(&self, sigmas: &[f64]) -> Result<DMatrix<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    /// Cumulative explained-variance ratio the kept components must reach.
    pub var_threshold: f64,
    /// Lower bound on the number of kept components.
    pub min_components: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            var_threshold: 0.95,
            min_components: 4,
        }
    }
}

impl PcaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.var_threshold > 0.0 && self.var_threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "variance threshold must lie in (0, 1], got {}",
                self.var_threshold
            )));
        }
        if self.min_components == 0 {
            return Err(Error::InvalidParameter(
                "minimum component count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// n_ref x Q, orthonormal columns, each column's largest-magnitude
    /// entry positive.
    basis: DMatrix<f64>,
    /// Covariance eigenvalues of the kept components, nonincreasing.
    eigenvalues: Vec<f64>,
    /// Kept components' fractions of the total variance.
    explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    fn check_sigmas(&self, sigmas: &[f64]) -> Result<()> {
        if sigmas.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch(format!(
                "got {} coefficient deviations for {} components",
                sigmas.len(),
                self.latent_dim()
            )));
        }
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(
                "coefficient standard deviations must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

impl DimensionReduction for PcaModel {
    fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn field_dim(&self) -> usize {
        self.mean.len()
    }

    fn encode(&self, field: &DVector<f64>) -> Result<DVector<f64>> {
        if field.len() != self.field_dim() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} points, model expects {}",
                field.len(),
                self.field_dim()
            )));
        }
        Ok(self.basis.transpose() * (field - &self.mean))
    }

    fn decode(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        if coeffs.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch(format!(
                "got {} coefficients for {} components",
                coeffs.len(),
                self.latent_dim()
            )));
        }
        Ok(&self.mean + &self.basis * coeffs)
    }

    fn coeff_std_to_field_var_diag(&self, sigmas: &[f64]) -> Result<DVector<f64>> {
        self.check_sigmas(sigmas)?;
        let mut var = DVector::zeros(self.field_dim());
        for (q, s) in sigmas.iter().enumerate() {
            let s2 = s * s;
            for i in 0..self.field_dim() {
                let b = self.basis[(i, q)];
                var[i] += b * b * s2;
            }
        }
        Ok(var)
    }

    fn coeff_std_to_field_cov(&self, sigmas: &[f64]) -> Result<DMatrix<f64>> {
        self.check_sigmas(sigmas)?;
        let mut scaled = self.basis.clone();
        for (q, s) in sigmas.iter().enumerate() {
            scaled.column_mut(q).scale_mut(*s);
        }
        Ok(&scaled * scaled.transpose())
    }
}

/// PCA over rows of `fields` (one transferred field per row). Components
/// are kept up to the variance threshold, floored at `min_components`,
/// and capped at the number of components the data can support,
/// min(N - 1, n_ref). Zero total variance yields an empty basis.
pub fn fit_pca(fields: &DMatrix<f64>, config: &PcaConfig) -> Result<PcaModel> {
    config.validate()?;
    let n = fields.nrows();
    let p = fields.ncols();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "PCA needs at least two fields, got {n}"
        )));
    }
    if p == 0 {
        return Err(Error::InvalidParameter("fields must be nonempty".into()));
    }
    if fields.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data {
            sample: None,
            message: "field matrix contains a non-finite value".into(),
        });
    }

    let mean = fields.row_mean().transpose();
    let mut centered = fields.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    let denom = (n - 1) as f64;
    let total_variance: f64 = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    let data_scale2 = fields.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let available = (n - 1).min(p);
    // Variance at relative machine-noise level means the rows coincide.
    if total_variance <= 1e-24 * (1.0 + data_scale2) {
        log::warn!("fields carry no variance; keeping zero components");
        return Ok(PcaModel {
            mean,
            basis: DMatrix::zeros(p, 0),
            eigenvalues: Vec::new(),
            explained_variance_ratio: Vec::new(),
        });
    }

    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Conditioning("SVD failed to produce singular vectors".into()))?;
    // Descending by construction; enforce it anyway for the cut rule.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let eigenvalue = |rank: usize| {
        let s = svd.singular_values[order[rank]];
        (s * s / denom).max(0.0)
    };
    let mut cumulative = 0.0;
    let mut q_threshold = available;
    for k in 0..available {
        cumulative += eigenvalue(k) / total_variance;
        if cumulative >= config.var_threshold {
            q_threshold = k + 1;
            break;
        }
    }
    let q = q_threshold.max(config.min_components).min(available);

    let mut basis = DMatrix::zeros(p, q);
    let mut eigenvalues = Vec::with_capacity(q);
    for (k, &ok) in order.iter().take(q).enumerate() {
        let mut col: DVector<f64> = v_t.row(ok).transpose();
        // Deterministic sign: largest-magnitude entry (first on ties) positive.
        let mut lead = 0;
        for i in 1..p {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        basis.set_column(k, &col);
        eigenvalues.push(eigenvalue(k));
    }
    let explained_variance_ratio = eigenvalues.iter().map(|e| e / total_variance).collect();
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        explained_variance_ratio,
    })
}

/// Registry of reducer strategies by name. Only PCA ships; the entry
/// point exists so configuration can select future reducers.
pub fn reduction_names() -> Vec<&'static str> {
    vec!["pca"]
}

pub fn fit_reduction(name: &str, fields: &DMatrix<f64>, config: &PcaConfig) -> Result<PcaModel> {
    match name {
        "pca" => fit_pca(fields, config),
        _ => Err(Error::UnknownName {
            kind: "dimension reduction",
            name: name.to_string(),
            available: reduction_names().join(", "),
        }),
    }
}
