//! Small dense L-BFGS with a weak Wolfe line search. The objective
//! returns `None` at infeasible points (failed factorizations); the line
//! search treats those as +infinity and bisects past them. The curvature
//! condition keeps every stored (s, y) pair positive, which matters on
//! objectives with indefinite regions where Armijo-only steps would
//! freeze the history.

const MEMORY: usize = 8;
const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_PROBES: usize = 60;

pub(crate) struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Probe {
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    step: f64,
}

/// Weak Wolfe search along `d` from `x`: bisect when Armijo fails or the
/// point is infeasible, expand when the slope is still too negative.
/// Falls back to the best Armijo point if curvature never holds.
fn line_search(
    objective: &mut impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    x: &[f64],
    d: &[f64],
    value: f64,
    slope: f64,
) -> Option<Probe> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut t = 1.0f64;
    let mut best_armijo: Option<Probe> = None;
    for _ in 0..MAX_PROBES {
        let cand: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        match objective(&cand) {
            None => hi = t,
            Some((v, g)) => {
                if v > value + WOLFE_C1 * t * slope {
                    hi = t;
                } else {
                    let curv_ok = dot(&g, d) >= WOLFE_C2 * slope;
                    let probe = Probe {
                        x: cand,
                        value: v,
                        grad: g,
                        step: t,
                    };
                    if curv_ok {
                        return Some(probe);
                    }
                    if best_armijo.as_ref().is_none_or(|b| t > b.step) {
                        best_armijo = Some(probe);
                    }
                    lo = t;
                }
            }
        }
        t = if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * lo.max(0.5)
        };
        if t <= 0.0 || !t.is_finite() || (hi.is_finite() && hi - lo <= 1e-16 * hi.max(1.0)) {
            break;
        }
    }
    best_armijo
}

/// Minimize `objective` starting at `x0`. Returns `None` only if the
/// starting point itself is infeasible.
pub(crate) fn lbfgs_minimize(
    x0: &[f64],
    mut objective: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    max_iters: usize,
) -> Option<OptimOutcome> {
    let mut x = x0.to_vec();
    let (mut value, mut grad) = objective(&x)?;

    // (s, y, 1/(y.s)) pairs, newest last.
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();

    for _ in 0..max_iters {
        if inf_norm(&grad) <= 1e-8 * (1.0 + value.abs()) {
            break;
        }

        // Two-loop recursion for the search direction.
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = vec![0.0; pairs.len()];
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alphas[i] = a;
            for (dj, yj) in d.iter_mut().zip(y) {
                *dj -= a * yj;
            }
        }
        if let Some((s, y, _)) = pairs.last() {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for dj in d.iter_mut() {
                *dj *= gamma;
            }
        }
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            for (dj, sj) in d.iter_mut().zip(s) {
                *dj += (alphas[i] - b) * sj;
            }
        }

        let mut slope = dot(&d, &grad);
        if !(slope < 0.0) {
            // Curvature history went stale; fall back to steepest descent.
            pairs.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = dot(&d, &grad);
            if !(slope < 0.0) {
                break;
            }
        }

        let Some(probe) = line_search(&mut objective, &x, &d, value, slope) else {
            break;
        };

        let s: Vec<f64> = probe.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = probe.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        // Wolfe guarantees sy > 0 in exact arithmetic; guard roundoff.
        if sy > 1e-12 * inf_norm(&s) * inf_norm(&y) {
            if pairs.len() == MEMORY {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }

        let step_size = inf_norm(&d) * probe.step;
        let improvement = value - probe.value;
        x = probe.x;
        value = probe.value;
        grad = probe.grad;
        if step_size < 1e-12 || improvement < 1e-12 * (1.0 + value.abs()) {
            break;
        }
    }
    Some(OptimOutcome { x, value })
}
