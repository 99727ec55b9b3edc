//! Reference measure construction. The workhorse is greedy MMD
//! subsampling with the distance-induced kernel; alternative strategies
//! (uniform grid, explicit point file, SWWL-median sample pick) register
//! under names and are selected at runtime.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::swwl::{SwwlConfig, SwwlSpec};
use crate::ot::EmpiricalMeasure;

/// Where a reference came from; carried into the model archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
}

/// The shared support all training signals are transported onto.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeasure {
    measure: EmpiricalMeasure,
    provenance: Provenance,
}

impl ReferenceMeasure {
    pub fn new(measure: EmpiricalMeasure, provenance: Provenance) -> Self {
        Self {
            measure,
            provenance,
        }
    }

    pub fn measure(&self) -> &EmpiricalMeasure {
        &self.measure
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.measure.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }
}

/// Distance-induced kernel `k(x, y) = ||x|| + ||y|| - ||x - y||`.
pub fn distance_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "points have different dimensions ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dist = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(norm(x) + norm(y) - dist)
}

fn row_norm(m: &DMatrix<f64>, i: usize) -> f64 {
    (0..m.ncols())
        .map(|c| m[(i, c)] * m[(i, c)])
        .sum::<f64>()
        .sqrt()
}

fn row_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|c| {
            let d = a[(i, c)] - b[(j, c)];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn kernel_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    row_norm(a, i) + row_norm(b, j) - row_dist(a, i, b, j)
}

/// Squared MMD between two uniform empirical measures, as the full
/// V-statistic (diagonal terms included) of the distance-induced kernel.
pub fn mmd_squared(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "measures live in different dimensions ({} vs {})",
            p.dim(),
            q.dim()
        )));
    }
    let (sp, sq) = (p.support(), q.support());
    let (n, m) = (p.len(), q.len());
    let sum_over = |rows: usize, f: &(dyn Fn(usize) -> f64 + Sync)| -> f64 {
        let partials: Vec<f64> = (0..rows).into_par_iter().map(f).collect();
        partials.iter().sum()
    };
    let pp = sum_over(n, &|i| (0..n).map(|j| kernel_rows(sp, i, sp, j)).sum());
    let qq = sum_over(m, &|i| (0..m).map(|j| kernel_rows(sq, i, sq, j)).sum());
    let pq = sum_over(n, &|i| (0..m).map(|j| kernel_rows(sp, i, sq, j)).sum());
    Ok(pp / (n * n) as f64 + qq / (m * m) as f64 - 2.0 * pq / (n * m) as f64)
}

/// Greedy MMD subsampling: repeatedly add the point whose inclusion
/// minimizes the squared MMD between `mu` and the uniform measure on the
/// selection. Returns the chosen indices in selection order. Ties break
/// to the smallest index. Running kernel sums make each step O(n)
/// after an O(n^2) precomputation.
pub fn mmd_subsample(mu: &EmpiricalMeasure, m: usize) -> Result<Vec<usize>> {
    let n = mu.len();
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!(
            "subsample size {m} must be between 1 and {n}"
        )));
    }
    let sup = mu.support();
    // s[j] = sum_a k(F_a, F_j); diag[j] = k(F_j, F_j) = 2 ||F_j||.
    let s: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| (0..n).map(|a| kernel_rows(sup, a, sup, j)).sum())
        .collect();
    let diag: Vec<f64> = (0..n).map(|j| 2.0 * row_norm(sup, j)).collect();
    let full_term = s.iter().sum::<f64>() / (n * n) as f64;

    let mut selected = Vec::with_capacity(m);
    let mut in_sel = vec![false; n];
    // cross[j] = sum over selected l of k(F_l, F_j).
    let mut cross = vec![0.0f64; n];
    let mut sel_pair_sum = 0.0; // sum of k over selected x selected
    let mut sel_mu_sum = 0.0; // sum of s over selected

    for step in 0..m {
        let count = (step + 1) as f64;
        let mut best_j = usize::MAX;
        let mut best_score = f64::INFINITY;
        for j in 0..n {
            if in_sel[j] {
                continue;
            }
            let within = (sel_pair_sum + 2.0 * cross[j] + diag[j]) / (count * count);
            let against = (sel_mu_sum + s[j]) / (n as f64 * count);
            let score = full_term + within - 2.0 * against;
            if score < best_score {
                best_score = score;
                best_j = j;
            }
        }
        sel_pair_sum += 2.0 * cross[best_j] + diag[best_j];
        sel_mu_sum += s[best_j];
        in_sel[best_j] = true;
        selected.push(best_j);
        let new_cross: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j| kernel_rows(sup, best_j, sup, j))
            .collect();
        for (c, add) in cross.iter_mut().zip(new_cross) {
            *c += add;
        }
    }
    Ok(selected)
}

fn take_rows(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(indices.len(), m.ncols());
    for (r, &i) in indices.iter().enumerate() {
        for c in 0..m.ncols() {
            out[(r, c)] = m[(i, c)];
        }
    }
    out
}

/// Declarative reference choice, as stored in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    /// Registry key: one of [`strategy_names`].
    pub strategy: String,
    /// Training sample to draw from (train-subsample).
    pub sample: Option<usize>,
    /// Target support size (train-subsample, swwl-median).
    pub size: Option<usize>,
    /// Axis lower bounds (uniform-grid).
    pub grid_min: Option<Vec<f64>>,
    /// Axis upper bounds (uniform-grid).
    pub grid_max: Option<Vec<f64>>,
    /// Points per axis (uniform-grid).
    pub grid_shape: Option<Vec<usize>>,
    /// Point-cloud file (explicit).
    pub points_file: Option<String>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            strategy: "train-subsample".into(),
            sample: None,
            size: None,
            grid_min: None,
            grid_max: None,
            grid_shape: None,
            points_file: None,
        }
    }
}

impl ReferenceConfig {
    /// Short human-readable form used in grid-search rankings and logs.
    pub fn describe(&self) -> String {
        let mut parts = vec![self.strategy.clone()];
        if let Some(s) = self.sample {
            parts.push(format!("sample={s}"));
        }
        if let Some(s) = self.size {
            parts.push(format!("size={s}"));
        }
        if let Some(shape) = &self.grid_shape {
            let dims: Vec<String> = shape.iter().map(|v| v.to_string()).collect();
            parts.push(format!("grid={}", dims.join("x")));
        }
        if let Some(p) = &self.points_file {
            parts.push(format!("file={p}"));
        }
        parts.join(" ")
    }
}

/// Inputs a strategy may draw on. `measures` are the WL-lifted training
/// measures in dataset order; `base_dir` resolves relative point files.
pub struct ReferenceContext<'a> {
    pub measures: &'a [EmpiricalMeasure],
    pub swwl: SwwlConfig,
    pub base_dir: &'a std::path::Path,
}

/// A named way of constructing the reference measure.
pub trait ReferenceStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, cfg: &ReferenceConfig, ctx: &ReferenceContext<'_>) -> Result<ReferenceMeasure>;
}

struct TrainSubsample;

impl TrainSubsample {
    fn subsample(
        &self,
        strategy: &'static str,
        sample_id: usize,
        measure: &EmpiricalMeasure,
        size: Option<usize>,
    ) -> Result<ReferenceMeasure> {
        let size = size.unwrap_or(measure.len());
        let indices = mmd_subsample(measure, size)?;
        let support = take_rows(measure.support(), &indices);
        Ok(ReferenceMeasure::new(
            EmpiricalMeasure::new(support)?,
            Provenance {
                strategy: strategy.into(),
                source_sample: Some(sample_id),
                subsample_size: Some(size),
                grid_shape: None,
                source_path: None,
            },
        ))
    }
}

impl ReferenceStrategy for TrainSubsample {
    fn name(&self) -> &'static str {
        "train-subsample"
    }

    fn build(&self, cfg: &ReferenceConfig, ctx: &ReferenceContext<'_>) -> Result<ReferenceMeasure> {
        let sample_id = cfg.sample.unwrap_or(0);
        let measure = ctx.measures.get(sample_id).ok_or_else(|| Error::Data {
            sample: Some(sample_id),
            message: format!(
                "reference sample {sample_id} is out of range (dataset has {})",
                ctx.measures.len()
            ),
        })?;
        self.subsample(self.name(), sample_id, measure, cfg.size)
    }
}

struct UniformGrid;

impl ReferenceStrategy for UniformGrid {
    fn name(&self) -> &'static str {
        "uniform-grid"
    }

    fn build(&self, cfg: &ReferenceConfig, ctx: &ReferenceContext<'_>) -> Result<ReferenceMeasure> {
        let (min, max, shape) = match (&cfg.grid_min, &cfg.grid_max, &cfg.grid_shape) {
            (Some(a), Some(b), Some(s)) => (a, b, s),
            _ => {
                return Err(Error::InvalidParameter(
                    "uniform-grid needs grid_min, grid_max, and grid_shape".into(),
                ))
            }
        };
        let dim = shape.len();
        if dim == 0 || min.len() != dim || max.len() != dim {
            return Err(Error::InvalidParameter(
                "grid_min, grid_max, and grid_shape must share a nonzero length".into(),
            ));
        }
        for a in 0..dim {
            if shape[a] == 0 {
                return Err(Error::InvalidParameter(format!(
                    "grid axis {a} has zero points"
                )));
            }
            if !(min[a] <= max[a]) {
                return Err(Error::InvalidParameter(format!(
                    "grid axis {a} has min {} > max {}",
                    min[a], max[a]
                )));
            }
        }
        if let Some(m) = ctx.measures.first() {
            if m.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "grid dimension {dim} does not match the training measures' dimension {}",
                    m.dim()
                )));
            }
        }
        let total: usize = shape.iter().product();
        let mut support = DMatrix::zeros(total, dim);
        // Row-major enumeration, last axis fastest; inclusive endpoints,
        // single-point axes sit at the midpoint.
        for r in 0..total {
            let mut rem = r;
            for a in (0..dim).rev() {
                let idx = rem % shape[a];
                rem /= shape[a];
                support[(r, a)] = if shape[a] == 1 {
                    0.5 * (min[a] + max[a])
                } else {
                    min[a] + (max[a] - min[a]) * idx as f64 / (shape[a] - 1) as f64
                };
            }
        }
        Ok(ReferenceMeasure::new(
            EmpiricalMeasure::new(support)?,
            Provenance {
                strategy: self.name().into(),
                source_sample: None,
                subsample_size: None,
                grid_shape: Some(shape.clone()),
                source_path: None,
            },
        ))
    }
}

struct ExplicitPoints;

impl ReferenceStrategy for ExplicitPoints {
    fn name(&self) -> &'static str {
        "explicit"
    }

    fn build(&self, cfg: &ReferenceConfig, ctx: &ReferenceContext<'_>) -> Result<ReferenceMeasure> {
        let rel = cfg.points_file.as_ref().ok_or_else(|| {
            Error::InvalidParameter("explicit reference needs points_file".into())
        })?;
        let measure = crate::dataset::read_points(&ctx.base_dir.join(rel))?;
        if let Some(m) = ctx.measures.first() {
            if m.dim() != measure.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "point file dimension {} does not match the training measures' dimension {}",
                    measure.dim(),
                    m.dim()
                )));
            }
        }
        Ok(ReferenceMeasure::new(
            measure,
            Provenance {
                strategy: self.name().into(),
                source_sample: None,
                subsample_size: None,
                grid_shape: None,
                source_path: Some(rel.clone()),
            },
        ))
    }
}

/// Picks the most representative training sample by one greedy MMD step
/// in graph space: samples are compared through a Gaussian kernel over
/// their SWWL embeddings with the median pairwise distance as
/// lengthscale, then the winner is optionally subsampled.
struct SwwlMedian;

impl ReferenceStrategy for SwwlMedian {
    fn name(&self) -> &'static str {
        "swwl-median"
    }

    fn build(&self, cfg: &ReferenceConfig, ctx: &ReferenceContext<'_>) -> Result<ReferenceMeasure> {
        let n = ctx.measures.len();
        if n == 0 {
            return Err(Error::Data {
                sample: None,
                message: "swwl-median needs at least one training measure".into(),
            });
        }
        let dim = ctx.measures[0].dim();
        let spec = SwwlSpec::new(ctx.swwl, dim)?;
        let embeddings: Vec<_> = ctx
            .measures
            .iter()
            .map(|m| spec.embed_measure(m))
            .collect::<Result<_>>()?;
        let mut d2 = DMatrix::zeros(n, n);
        let mut offdiag = Vec::new();
        for i in 0..n {
            for j in 0..n {
                d2[(i, j)] = embeddings[i].distance_squared(&embeddings[j])?;
                if i < j {
                    offdiag.push(d2[(i, j)].sqrt());
                }
            }
        }
        let med = crate::util::median(&offdiag).unwrap_or(0.0);
        let ls2 = if med > 0.0 { med * med } else { 1.0 };
        // First greedy step of MMD subsampling over the graph cloud:
        // argmin_j k(e_j, e_j) - (2/n) sum_i k(e_i, e_j); self-term is
        // constant for this kernel, so the medoid-like sample wins.
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for j in 0..n {
            let cross: f64 = (0..n).map(|i| (-d2[(i, j)] / (2.0 * ls2)).exp()).sum();
            let score = 1.0 - 2.0 * cross / n as f64;
            if score < best_score {
                best_score = score;
                best = j;
            }
        }
        let mut built =
            TrainSubsample.subsample(self.name(), best, &ctx.measures[best], cfg.size)?;
        built.provenance.strategy = self.name().into();
        Ok(built)
    }
}

pub fn strategies() -> Vec<Box<dyn ReferenceStrategy>> {
    vec![
        Box::new(TrainSubsample),
        Box::new(UniformGrid),
        Box::new(ExplicitPoints),
        Box::new(SwwlMedian),
    ]
}

pub fn strategy_names() -> Vec<&'static str> {
    strategies().iter().map(|s| s.name()).collect()
}

/// Look the strategy up by name and run it.
pub fn build_reference(
    cfg: &ReferenceConfig,
    ctx: &ReferenceContext<'_>,
) -> Result<ReferenceMeasure> {
    let all = strategies();
    let strategy = all
        .iter()
        .find(|s| s.name() == cfg.strategy)
        .ok_or_else(|| Error::UnknownName {
            kind: "reference strategy",
            name: cfg.strategy.clone(),
            available: strategy_names().join(", "),
        })?;
    strategy.build(cfg, ctx)
}
