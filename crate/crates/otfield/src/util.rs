//! Small numeric helpers shared across modules.

/// Format a float with 17 significant digits so text round-trips are exact.
pub fn format_f64(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        // Integers print compactly; `from_str` recovers them exactly.
        format!("{:.1}", x)
    } else {
        format!("{:.16e}", x)
    }
}

/// log(sum(exp(v))) without overflow. Returns -inf for an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &x in v {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Sum after sorting by value, so the result does not depend on input order.
pub fn order_independent_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Median of a slice. Empty input returns None.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        Some(v[n / 2])
    } else {
        Some(0.5 * (v[n / 2 - 1] + v[n / 2]))
    }
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}
