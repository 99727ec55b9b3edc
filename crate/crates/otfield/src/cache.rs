//! Directory-backed cache of transport plans keyed by content hashes of
//! (source measure, reference measure, lambda, solver settings). A grid
//! search and a subsequent training run at the winning cell share plans
//! instead of re-solving them.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ot::{sinkhorn_plan, EmpiricalMeasure, SinkhornConfig, TransportPlan};

#[derive(Clone, Debug)]
pub struct PlanCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PlanRecord {
    source_len: usize,
    target_len: usize,
    lambda: f64,
    marginal_residual: f64,
    /// Row-major plan entries.
    values: Vec<f64>,
}

impl PlanCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn key(
        mu: &EmpiricalMeasure,
        reference: &EmpiricalMeasure,
        lambda: f64,
        cfg: &SinkhornConfig,
    ) -> String {
        let mut hasher = Sha256::new();
        hasher.update(mu.content_bytes());
        hasher.update(reference.content_bytes());
        hasher.update(lambda.to_bits().to_le_bytes());
        hasher.update(cfg.tol.to_bits().to_le_bytes());
        hasher.update((cfg.max_iter as u64).to_le_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// A cached plan if one exists and parses to the expected shape;
    /// unreadable entries are treated as misses and recomputed.
    fn load(&self, path: &Path, n: usize, m: usize, lambda: f64) -> Option<TransportPlan> {
        let text = std::fs::read_to_string(path).ok()?;
        let record: PlanRecord = serde_json::from_str(&text).ok()?;
        if record.source_len != n
            || record.target_len != m
            || record.lambda.to_bits() != lambda.to_bits()
            || record.values.len() != n * m
        {
            return None;
        }
        let matrix = DMatrix::from_row_slice(n, m, &record.values);
        Some(TransportPlan::from_parts(
            matrix,
            record.lambda,
            record.marginal_residual,
        ))
    }

    fn store(&self, path: &Path, plan: &TransportPlan) {
        let matrix = plan.matrix();
        let mut values = Vec::with_capacity(matrix.len());
        for r in 0..matrix.nrows() {
            for c in 0..matrix.ncols() {
                values.push(matrix[(r, c)]);
            }
        }
        let record = PlanRecord {
            source_len: matrix.nrows(),
            target_len: matrix.ncols(),
            lambda: plan.lambda(),
            marginal_residual: plan.marginal_residual(),
            values,
        };
        // Cache writes are best-effort; a failed write only costs speed.
        if let Ok(text) = serde_json::to_string(&record) {
            let _ = crate::dataset::write_atomic(path, text.as_bytes());
        }
    }

    pub fn plan(
        &self,
        mu: &EmpiricalMeasure,
        reference: &EmpiricalMeasure,
        lambda: f64,
        cfg: &SinkhornConfig,
    ) -> Result<TransportPlan> {
        let path = self.dir.join(format!(
            "{}.plan.json",
            Self::key(mu, reference, lambda, cfg)
        ));
        if let Some(plan) = self.load(&path, mu.len(), reference.len(), lambda) {
            return Ok(plan);
        }
        let plan = sinkhorn_plan(mu, reference, lambda, cfg)?;
        self.store(&path, &plan);
        Ok(plan)
    }
}

/// Solve through the cache when one is given.
pub fn plan_via_cache(
    cache: Option<&PlanCache>,
    mu: &EmpiricalMeasure,
    reference: &EmpiricalMeasure,
    lambda: f64,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    match cache {
        Some(cache) => cache.plan(mu, reference, lambda, cfg),
        None => sinkhorn_plan(mu, reference, lambda, cfg),
    }
}
