//! Exact rational Taylor expansions of the class fractions and rate functions
//! at time zero.
//!
//! The master ODE has a polynomial right-hand side, so the coefficients of
//! `x_i(t) = sum_m beta_{i,m} t^m` obey an exact recursion:
//! `(m+1) beta_{i,m+1} = [t^m] RHS_i(x(t))`.  Everything here runs in
//! `BigRational`, which makes vanishing orders (the first nonzero coefficient
//! index) exact decisions rather than floating-point judgement calls.

use num::{BigRational, FromPrimitive, ToPrimitive, Zero};

use crate::hydro::poly::{self, Poly};
use crate::rules::RuleTable;
use crate::{Error, Result};

pub(crate) type Ser = Vec<BigRational>;

fn big(r: num::rational::Rational64) -> BigRational {
    BigRational::new((*r.numer()).into(), (*r.denom()).into())
}

/// Index of the first nonzero coefficient, if any.
pub(crate) fn order(s: &Ser) -> Option<usize> {
    s.iter().position(|c| !c.is_zero())
}

/// Truncated product of two series (both already truncated to the same length).
fn mul_trunc(a: &Ser, b: &Ser, len: usize) -> Ser {
    let mut out = vec![BigRational::zero(); len];
    for (p, ca) in a.iter().enumerate().take(len) {
        if ca.is_zero() {
            continue;
        }
        for (q, cb) in b.iter().enumerate().take(len - p) {
            if cb.is_zero() {
                continue;
            }
            out[p + q] += ca * cb;
        }
    }
    out
}

/// Series of the class fractions through `t^max_order`, exactly.
pub(crate) fn x_series(rule: &RuleTable, max_order: usize) -> Vec<Ser> {
    let k = usize::from(rule.k());
    let dim = k + 1;
    let polys = poly::drift_polynomials(rule);

    // xs[i][m] = beta_{i,m}; seeded with everything in class 1.
    let mut xs: Vec<Ser> = vec![Vec::with_capacity(max_order + 1); dim];
    for (i, s) in xs.iter_mut().enumerate() {
        s.push(if i == 0 {
            BigRational::from_integer(1.into())
        } else {
            BigRational::zero()
        });
    }

    // Cached pair products P[u][v][m] = [t^m] x_u x_v for u <= v, filled one
    // order at a time as the x coefficients become available.
    let mut pairs: Vec<Vec<Ser>> = (0..dim)
        .map(|u| vec![Vec::new(); dim - u])
        .collect();

    for m in 0..max_order {
        // Extend pair products to coefficient index m.
        for u in 0..dim {
            for v in u..dim {
                let mut coeff = BigRational::zero();
                for p in 0..=m {
                    let (cu, cv) = (&xs[u][p], &xs[v][m - p]);
                    if !cu.is_zero() && !cv.is_zero() {
                        coeff += cu * cv;
                    }
                }
                pairs[u][v - u].push(coeff);
            }
        }
        // RHS coefficient at order m for each class, then integrate.
        for i in 0..dim {
            let mut rhs = BigRational::zero();
            for (coeff, mono) in &polys[i] {
                let (a, b, c, d) = (
                    usize::from(mono[0]),
                    usize::from(mono[1]),
                    usize::from(mono[2]),
                    usize::from(mono[3]),
                );
                let p12 = &pairs[a][b - a];
                let p34 = &pairs[c][d - c];
                let mut conv = BigRational::zero();
                for p in 0..=m {
                    let (x, y) = (&p12[p], &p34[m - p]);
                    if !x.is_zero() && !y.is_zero() {
                        conv += x * y;
                    }
                }
                if !conv.is_zero() {
                    rhs += big(*coeff) * conv;
                }
            }
            let next = rhs / BigRational::from_usize(m + 1).unwrap();
            xs[i].push(next);
        }
    }
    xs
}

/// Evaluates a rate polynomial on the exact class series.
pub(crate) fn poly_series(poly: &Poly, xs: &[Ser], len: usize) -> Ser {
    let mut out = vec![BigRational::zero(); len];
    for (coeff, mono) in poly {
        let p12 = mul_trunc(&xs[usize::from(mono[0])], &xs[usize::from(mono[1])], len);
        let p34 = mul_trunc(&xs[usize::from(mono[2])], &xs[usize::from(mono[3])], len);
        let prod = mul_trunc(&p12, &p34, len);
        let c = big(*coeff);
        for (slot, v) in prod.into_iter().enumerate() {
            if !v.is_zero() {
                out[slot] += &c * v;
            }
        }
    }
    out
}

/// Exact vanishing orders of the rate functions at time zero, plus the derived
/// exponents.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TaylorOrders {
    /// `m_a[i]`: vanishing order of the merge rate `a_{i+1}` at 0.
    pub m_a: Vec<u32>,
    /// `m_c[i]`: vanishing order of the attachment rate `c_{i+1}` at 0.
    pub m_c: Vec<u32>,
    /// `alpha = (1/2) min_i { 1 + 1/m_a[i], 1 + 2/m_c[i] }`, terms with a zero
    /// order dropped (their contribution is regular); `+inf` when every term
    /// drops.
    pub alpha: f64,
    /// `zeta = alpha / 2`, the critical-window exponent.
    pub zeta: f64,
}

/// Computes exact vanishing orders of `a_i` and `c_i` through `t^max_order`.
///
/// `max_order` must be at least 10 (default 16); a series that is identically
/// zero through `max_order` is reported as an error naming the series, since
/// the order cannot be decided at this truncation depth.
pub fn taylor_orders(rule: &RuleTable, max_order: usize) -> Result<TaylorOrders> {
    if max_order < 10 {
        return Err(Error::Validation(format!(
            "max_order must be >= 10, got {max_order}"
        )));
    }
    orders_with_depth(rule, max_order)
}

pub(crate) fn orders_with_depth(rule: &RuleTable, max_order: usize) -> Result<TaylorOrders> {
    let len = max_order + 1;
    let xs = x_series(rule, max_order);
    let k = usize::from(rule.k());
    let ord_omega = order(&xs[k]).ok_or_else(|| {
        Error::OrderUndetermined(format!(
            "x_w vanishes through order {max_order}; raise the expansion order"
        ))
    })?;

    let mut m_a = Vec::with_capacity(k);
    for (i, poly) in poly::a_polynomials(rule).iter().enumerate() {
        let s = poly_series(poly, &xs, len);
        let m = order(&s).ok_or_else(|| {
            Error::OrderUndetermined(format!(
                "a_{} vanishes through order {max_order}; raise the expansion order",
                i + 1
            ))
        })?;
        m_a.push(m as u32);
    }

    let mut m_c = Vec::with_capacity(k);
    for (i, poly) in poly::c_numerator_polynomials(rule).iter().enumerate() {
        let s = poly_series(poly, &xs, len);
        let m_num = order(&s).ok_or_else(|| {
            Error::OrderUndetermined(format!(
                "c_{} numerator vanishes through order {max_order}; raise the expansion order",
                i + 1
            ))
        })?;
        debug_assert!(m_num >= ord_omega, "c numerator divisible by x_w");
        m_c.push((m_num - ord_omega) as u32);
    }

    let mut best = f64::INFINITY;
    for &m in &m_a {
        if m >= 1 {
            best = best.min(1.0 + 1.0 / f64::from(m));
        }
    }
    for &m in &m_c {
        if m >= 1 {
            best = best.min(1.0 + 2.0 / f64::from(m));
        }
    }
    let alpha = 0.5 * best;
    Ok(TaylorOrders {
        m_a,
        m_c,
        alpha,
        zeta: alpha / 2.0,
    })
}

/// Continuous extensions of `c_i` and `b` at `v = 0`.
///
/// Both are 0/0 at zero; the limits are ratios of leading series coefficients
/// when numerator and denominator vanish to the same order, and zero when the
/// numerator vanishes deeper.  (`b` carries its convention factor 2.)
pub(crate) fn rate_zero_limits(rule: &RuleTable, max_order: usize) -> Result<(Vec<f64>, f64)> {
    let len = max_order + 1;
    let xs = x_series(rule, max_order);
    let k = usize::from(rule.k());
    let ord_omega = order(&xs[k]).ok_or_else(|| {
        Error::OrderUndetermined(format!(
            "x_w vanishes through order {max_order}; cannot extend rates to v = 0"
        ))
    })?;
    let lead_omega = xs[k][ord_omega].clone();

    let mut c0 = Vec::with_capacity(k);
    for poly in &poly::c_numerator_polynomials(rule) {
        let s = poly_series(poly, &xs, len);
        let value = match order(&s) {
            Some(m) if m == ord_omega => (&s[m] / &lead_omega).to_f64().unwrap(),
            _ => 0.0, // vanishes deeper than x_w (or beyond truncation)
        };
        c0.push(value);
    }

    let bs = poly_series(&poly::b_numerator_polynomial(rule), &xs, len);
    let b0 = match order(&bs) {
        Some(m) if m == 2 * ord_omega => {
            2.0 * (&bs[m] / (&lead_omega * &lead_omega)).to_f64().unwrap()
        }
        _ => 0.0,
    };
    Ok((c0, b0))
}
