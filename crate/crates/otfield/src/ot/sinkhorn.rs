//! Stabilized Sinkhorn iteration with an annealing schedule on the
//! regularization strength, so very small lambda still converges fast.
//! The hot loop runs matrix-vector scalings against a kernel with the
//! potentials absorbed; whenever a kernel row or column underflows to
//! zero, one exact log-domain update pair renormalizes the potentials.

use nalgebra::{DMatrix, DVector};

use super::{cost_matrix, EmpiricalMeasure, TransportPlan};
use crate::error::{Error, Result};

/// Convergence knobs for [`sinkhorn_plan`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Largest allowed deviation of any marginal from its target.
    pub tol: f64,
    /// Total iteration budget across all annealing stages.
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Annealing ladder: halve from the cost scale down to the target lambda.
fn lambda_schedule(lambda: f64, max_cost: f64) -> Vec<f64> {
    let mut stages = Vec::new();
    let mut eps = max_cost;
    while eps > lambda {
        stages.push(eps);
        eps *= 0.5;
    }
    stages.push(lambda);
    stages
}

/// Solve the entropy-regularized transport problem between two uniform
/// measures. The returned plan minimizes `<C,P> - lambda * H(P)` over
/// couplings of `(1/n, ..., 1/n)` and `(1/m, ..., 1/m)`.
///
/// Every iteration ends on a row update, so row sums are exact to
/// roundoff; only the column residual is iterated down to `cfg.tol`.
pub fn sinkhorn_plan(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    lambda: f64,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    if !(cfg.tol > 0.0) || !cfg.tol.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive and finite, got {}",
            cfg.tol
        )));
    }
    if cfg.max_iter == 0 {
        return Err(Error::InvalidParameter(
            "max_iter must be at least 1".into(),
        ));
    }

    let costs = cost_matrix(mu, nu)?;
    let c = costs.values();
    let (n, m) = (mu.len(), nu.len());
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let target_col = 1.0 / m as f64;
    let target_row = 1.0 / n as f64;

    let mut f = DVector::zeros(n);
    let mut g = DVector::zeros(m);
    let mut scratch = vec![0.0f64; n.max(m)];
    let mut s = DVector::zeros(m);
    let mut t = DVector::zeros(n);

    let stages = lambda_schedule(lambda, costs.max());
    let mut remaining = cfg.max_iter;
    let mut residual = f64::INFINITY;
    for (si, &lam) in stages.iter().enumerate() {
        let last = si + 1 == stages.len();
        // Coarse marginals suffice while annealing; only the final stage
        // must hit cfg.tol.
        let stage_tol = if last { cfg.tol } else { cfg.tol.max(1e-3) };
        let stage_cap = if last { remaining } else { remaining.min(100) };

        let mut kernel = scaled_kernel(c, &f, &g, lam);
        let mut u = DVector::from_element(n, 1.0);
        let mut w = DVector::from_element(m, 1.0);
        let mut used = 0usize;
        loop {
            // Column sums of the current plan; the state always ends on a
            // row update, so only columns can be off target.
            s.gemv_tr(1.0, &kernel, &u, 0.0);
            if used > 0 {
                residual = (0..m)
                    .map(|v| (s[v] * w[v] - target_col).abs())
                    .fold(0.0f64, f64::max);
                if residual <= stage_tol {
                    break;
                }
            }
            if used >= stage_cap || remaining == 0 {
                break;
            }

            // Guard against underflowed kernel sums: dividing by a
            // denormal would push a scaling to infinity and poison the
            // potentials through `ln` at the next absorption.
            let mut scaled = false;
            if s.iter().all(|&x| x > 1e-300) {
                for v in 0..m {
                    w[v] = target_col / s[v];
                }
                t.gemv(1.0, &kernel, &w, 0.0);
                if t.iter().all(|&x| x > 1e-300 && x.is_finite()) {
                    for i in 0..n {
                        u[i] = target_row / t[i];
                    }
                    scaled = true;
                }
            }
            if scaled {
                if u.amax() > 1e30 || w.amax() > 1e30 {
                    absorb(&mut f, &mut g, &mut u, &mut w, lam);
                    kernel = scaled_kernel(c, &f, &g, lam);
                }
            } else {
                // The kernel underflowed somewhere; renormalize exactly.
                absorb(&mut f, &mut g, &mut u, &mut w, lam);
                log_domain_pair(c, &mut f, &mut g, lam, log_a, log_b, &mut scratch);
                kernel = scaled_kernel(c, &f, &g, lam);
            }
            used += 1;
            remaining -= 1;
        }
        absorb(&mut f, &mut g, &mut u, &mut w, lam);

        if last && residual > cfg.tol {
            return Err(Error::NonConvergence {
                sample: None,
                residual,
                iterations: cfg.max_iter - remaining,
                tolerance: cfg.tol,
            });
        }
        if remaining == 0 && !last {
            return Err(Error::NonConvergence {
                sample: None,
                residual,
                iterations: cfg.max_iter,
                tolerance: cfg.tol,
            });
        }
    }

    let mut plan = DMatrix::zeros(n, m);
    for v in 0..m {
        for u in 0..n {
            plan[(u, v)] = ((f[u] + g[v] - c[(u, v)]) / lambda).exp();
        }
    }
    let row_res = (0..n)
        .map(|u| (plan.row(u).sum() - target_row).abs())
        .fold(0.0f64, f64::max);
    Ok(TransportPlan::from_parts(
        plan,
        lambda,
        residual.max(row_res),
    ))
}

/// Kernel with the current potentials folded in: `exp((f + g - C) / lam)`.
fn scaled_kernel(c: &DMatrix<f64>, f: &DVector<f64>, g: &DVector<f64>, lam: f64) -> DMatrix<f64> {
    let (n, m) = c.shape();
    DMatrix::from_fn(n, m, |u, v| ((f[u] + g[v] - c[(u, v)]) / lam).exp())
}

/// Fold the linear scalings back into the potentials and reset them to one.
fn absorb(
    f: &mut DVector<f64>,
    g: &mut DVector<f64>,
    u: &mut DVector<f64>,
    w: &mut DVector<f64>,
    lam: f64,
) {
    for (fi, ui) in f.iter_mut().zip(u.iter_mut()) {
        *fi += lam * ui.ln();
        *ui = 1.0;
    }
    for (gv, wv) in g.iter_mut().zip(w.iter_mut()) {
        *gv += lam * wv.ln();
        *wv = 1.0;
    }
}

/// One exact column-then-row potential update in the log domain. Used as an
/// underflow rescue when the linear kernel collapses to zero somewhere.
fn log_domain_pair(
    c: &DMatrix<f64>,
    f: &mut DVector<f64>,
    g: &mut DVector<f64>,
    lam: f64,
    log_a: f64,
    log_b: f64,
    scratch: &mut [f64],
) {
    let (n, m) = c.shape();
    for v in 0..m {
        for u in 0..n {
            scratch[u] = (f[u] - c[(u, v)]) / lam;
        }
        g[v] = lam * (log_b - crate::util::logsumexp(&scratch[..n]));
    }
    for u in 0..n {
        for v in 0..m {
            scratch[v] = (g[v] - c[(u, v)]) / lam;
        }
        f[u] = lam * (log_a - crate::util::logsumexp(&scratch[..m]));
    }
}
