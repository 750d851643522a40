//! Small helpers for functions tabulated on a uniform time grid.
//!
//! Everything downstream (rates, moments, kernels, sampling densities) lives on
//! the grid `t_j = j*h`, `j = 0..len`.  Between grid points the tabulated
//! function is read linearly, and integrals use the trapezoid rule, so all
//! quadrature in the crate is consistent to `O(h^2)`.

/// Linear interpolation of `values` tabulated at `t_j = j*h`, clamped to the
/// tabulated range.
pub fn interp(h: f64, values: &[f64], v: f64) -> f64 {
    debug_assert!(!values.is_empty());
    if v <= 0.0 {
        return values[0];
    }
    let last = (values.len() - 1) as f64 * h;
    if v >= last {
        return *values.last().unwrap();
    }
    let s = v / h;
    let j = s.floor() as usize;
    let frac = s - j as f64;
    values[j] + frac * (values[j + 1] - values[j])
}

/// Prefix trapezoid integrals: `out[j] = integral of the tabulated function
/// over [0, j*h]`.
pub fn prefix_trapezoid(h: f64, values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Integral between two times, read from a prefix array by linear
/// interpolation (consistent with trapezoid cells).
pub fn integral_between(h: f64, prefix: &[f64], lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    interp(h, prefix, hi) - interp(h, prefix, lo)
}

/// Draws a point from the density whose prefix integrals are `prefix`,
/// restricted to `[0, hi]`, by inverting the CDF.  `u` must be uniform on
/// `[0, 1)`.  Returns `None` when the restricted mass vanishes.
pub fn sample_by_density(h: f64, prefix: &[f64], hi: f64, u: f64) -> Option<f64> {
    let total = interp(h, prefix, hi);
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    // Binary search the first grid index with prefix >= target, then place the
    // sample within the cell proportionally to the cell mass.
    let hi_idx = ((hi / h).ceil() as usize).min(prefix.len() - 1).max(1);
    let mut lo_j = 0usize;
    let mut hi_j = hi_idx;
    while hi_j - lo_j > 1 {
        let mid = (lo_j + hi_j) / 2;
        if prefix[mid] < target {
            lo_j = mid;
        } else {
            hi_j = mid;
        }
    }
    let cell_mass = prefix[hi_j] - prefix[lo_j];
    let frac = if cell_mass > 0.0 {
        (target - prefix[lo_j]) / cell_mass
    } else {
        0.5
    };
    Some(((lo_j as f64 + frac) * h).min(hi))
}

/// Max of tabulated values over `[0, hi]` (by grid points, inclusive of the
/// cell containing `hi`).
pub fn max_on(h: f64, values: &[f64], hi: f64) -> f64 {
    let stop = ((hi / h).ceil() as usize + 1).min(values.len());
    values[..stop.max(1)]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
}
