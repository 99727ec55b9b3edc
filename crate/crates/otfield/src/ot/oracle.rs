//! Exact (unregularized) transport solvers used as ground truth for the
//! Sinkhorn solver. Small square instances enumerate permutations; the
//! rest go through a dense two-phase simplex with Bland's rule.

use nalgebra::DMatrix;

use super::{cost_matrix, EmpiricalMeasure, TransportPlan};
use crate::error::{Error, Result};

const MAX_LP_CELLS: usize = 2_500;
const MAX_ENUM_SIZE: usize = 10;

/// Solve the unregularized transport problem exactly and return the
/// optimal cost together with an optimal plan (`lambda` is recorded as 0).
/// Instances beyond roughly 50x50 are refused.
pub fn exact_plan_oracle(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(f64, TransportPlan)> {
    let costs = cost_matrix(mu, nu)?;
    let (n, m) = (mu.len(), nu.len());
    if n == m && n <= MAX_ENUM_SIZE {
        Ok(enumeration_plan(costs.values()))
    } else if n * m <= MAX_LP_CELLS {
        lp_plan(costs.values())
    } else {
        Err(Error::OracleTooLarge(format!(
            "{n}x{m} exceeds the {MAX_LP_CELLS}-cell cap"
        )))
    }
}

/// Extreme points of the square uniform coupling polytope are scaled
/// permutation matrices, so exhaustive search over permutations is exact.
pub(crate) fn enumeration_plan(c: &DMatrix<f64>) -> (f64, TransportPlan) {
    let n = c.nrows();
    let perm_cost =
        |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(u, &v)| c[(u, v)]).sum() };

    // Heap's algorithm, keeping the first permutation attaining the minimum.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = perm_cost(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            let cost = perm_cost(&perm);
            if cost < best_cost {
                best_cost = cost;
                best = perm.clone();
            }
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }

    let mass = 1.0 / n as f64;
    let mut plan = DMatrix::zeros(n, n);
    for (u, &v) in best.iter().enumerate() {
        plan[(u, v)] = mass;
    }
    (best_cost * mass, TransportPlan::from_parts(plan, 0.0, 0.0))
}

/// Transportation LP: minimize `<C, x>` subject to row sums `1/n`, column
/// sums `1/m`, `x >= 0`. One column constraint is dropped (it is implied),
/// leaving a full-rank system for the simplex.
pub(crate) fn lp_plan(c: &DMatrix<f64>) -> Result<(f64, TransportPlan)> {
    let (n, m) = c.shape();
    let structurals = n * m;
    let rows = n + m - 1;
    let total = structurals + rows; // artificials appended after structurals

    // Constraint matrix in dense tableau form; last column is the rhs.
    let mut a = DMatrix::<f64>::zeros(rows, total + 1);
    for u in 0..n {
        for v in 0..m {
            a[(u, u * m + v)] = 1.0;
        }
        a[(u, total)] = 1.0 / n as f64;
    }
    for v in 0..m - 1 {
        for u in 0..n {
            a[(n + v, u * m + v)] = 1.0;
        }
        a[(n + v, total)] = 1.0 / m as f64;
    }
    for r in 0..rows {
        a[(r, structurals + r)] = 1.0;
    }
    let mut basis: Vec<usize> = (structurals..total).collect();

    // Phase 1: minimize the sum of artificials.
    let mut obj = vec![0.0f64; total + 1];
    obj[structurals..total].fill(1.0);
    for r in 0..rows {
        for j in 0..=total {
            obj[j] -= a[(r, j)];
        }
    }
    run_simplex(&mut a, &mut basis, &mut obj, total, |_| true)?;
    if -obj[total] > 1e-9 {
        return Err(Error::Conditioning(
            "transport LP phase 1 ended infeasible".into(),
        ));
    }
    // Remove lingering artificials from the basis at zero level.
    for r in 0..rows {
        if basis[r] >= structurals {
            if let Some(j) = (0..structurals).find(|&j| a[(r, j)].abs() > 1e-9) {
                pivot(&mut a, &mut obj, r, j, total);
                basis[r] = j;
            }
        }
    }

    // Phase 2: the real objective over structural variables only.
    for j in 0..=total {
        obj[j] = if j < structurals {
            c[(j / m, j % m)]
        } else {
            0.0
        };
    }
    for r in 0..rows {
        let cb = if basis[r] < structurals {
            c[(basis[r] / m, basis[r] % m)]
        } else {
            0.0
        };
        if cb != 0.0 {
            for j in 0..=total {
                obj[j] -= cb * a[(r, j)];
            }
        }
    }
    run_simplex(&mut a, &mut basis, &mut obj, total, |j| j < structurals)?;

    let mut plan = DMatrix::zeros(n, m);
    for r in 0..rows {
        if basis[r] < structurals {
            plan[(basis[r] / m, basis[r] % m)] = a[(r, total)].max(0.0);
        }
    }
    let cost = plan.dot(c);
    let mut residual = 0.0f64;
    for u in 0..n {
        residual = residual.max((plan.row(u).sum() - 1.0 / n as f64).abs());
    }
    for v in 0..m {
        residual = residual.max((plan.column(v).sum() - 1.0 / m as f64).abs());
    }
    Ok((cost, TransportPlan::from_parts(plan, 0.0, residual)))
}

/// Bland-rule simplex on a tableau whose objective row is kept reduced.
/// `allowed` filters which variables may enter (used to ban artificials).
fn run_simplex(
    a: &mut DMatrix<f64>,
    basis: &mut [usize],
    obj: &mut [f64],
    total: usize,
    allowed: impl Fn(usize) -> bool,
) -> Result<()> {
    let rows = a.nrows();
    for _ in 0..200_000 {
        let entering = (0..total).find(|&j| allowed(j) && obj[j] < -1e-11);
        let Some(e) = entering else {
            return Ok(());
        };
        // Ratio test; ties resolved by smallest basic variable index
        // (Bland's rule), which rules out cycling on degenerate bases.
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for r in 0..rows {
            if a[(r, e)] > 1e-11 {
                let ratio = a[(r, total)] / a[(r, e)];
                let better = ratio < best_ratio - 1e-15
                    || ((ratio - best_ratio).abs() <= 1e-15
                        && leave.is_some_and(|l| basis[r] < basis[l]));
                if better || leave.is_none() {
                    best_ratio = ratio.min(best_ratio);
                    leave = Some(r);
                }
            }
        }
        let Some(r) = leave else {
            return Err(Error::Conditioning("transport LP is unbounded".into()));
        };
        pivot(a, obj, r, e, total);
        basis[r] = e;
    }
    Err(Error::Conditioning(
        "transport LP exceeded its pivot budget".into(),
    ))
}

fn pivot(a: &mut DMatrix<f64>, obj: &mut [f64], r: usize, e: usize, total: usize) {
    let piv = a[(r, e)];
    for j in 0..=total {
        a[(r, j)] /= piv;
    }
    for i in 0..a.nrows() {
        if i != r {
            let factor = a[(i, e)];
            if factor != 0.0 {
                for j in 0..=total {
                    a[(i, j)] -= factor * a[(r, j)];
                }
            }
        }
    }
    let factor = obj[e];
    if factor != 0.0 {
        for j in 0..=total {
            obj[j] -= factor * a[(r, j)];
        }
    }
}
