//! Hydrodynamic limit of a bounded-size rule: the class-fraction ODE, the
//! merge/attachment rate functions it induces, their `delta`-inflated variants,
//! and exact Taylor data at time zero.
//!
//! Conventions used throughout the crate:
//! * the state vector is `(x_1, ..., x_K, x_w)`, the fractions of vertices in
//!   components of each class, with `x(0) = (1, 0, ..., 0)`;
//! * `a_i(v)` (for `i = 1..=K`) is `1/n` times the rate at which components of
//!   size `K+i` are created by merging two bounded components;
//! * `c_i(v)` is the rate at which a bounded component of size `i` attaches to
//!   a *given* vertex of the unbounded phase;
//! * `b(v)` is the normalized rate at which a *given unordered pair* of
//!   unbounded-phase vertices gets joined, i.e. per-pair rate `b(v)/n`.  This
//!   carries a convention factor 2 relative to the raw pair functional
//!   `F_{w,w}/x_w^2`, which is what makes the per-pair reading exact (for the
//!   Bohman-Frieze rule it yields `b = 1 - x^2`, and for the always-second
//!   rule `b = 1`, matching direct event accounting).

mod poly;
mod taylor;

pub use taylor::{taylor_orders, TaylorOrders};

pub(crate) use poly::lower;

use serde::{Deserialize, Serialize};

use crate::rules::RuleTable;
use crate::{gridfn, Error, Result};

/// Default number of RK4 steps over a solve horizon.
pub const DEFAULT_STEPS: usize = 20_000;

/// Provisional horizon used before a critical-time estimate exists.
pub const BOOTSTRAP_HORIZON: f64 = 4.0;

/// Smallest unbounded-phase fraction the rate quotients accept at `v > 0`.
const OMEGA_FLOOR: f64 = 1e-300;

/// Solution of the master ODE on a uniform grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OdeSolution {
    pub rule_name: String,
    pub rule_fingerprint: u64,
    pub k: u8,
    /// Grid step; point `j` sits at time `j * h`.
    pub h: f64,
    /// `states[j]` is the state vector at grid point `j` (length `K+1`).
    pub states: Vec<Vec<f64>>,
    /// Right-hand side at each grid point, for cubic Hermite interpolation.
    pub derivs: Vec<Vec<f64>>,
}

impl OdeSolution {
    /// Number of grid points (steps + 1).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    /// True when the solution holds no grid points (never produced here).
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Solved horizon.
    pub fn horizon(&self) -> f64 {
        (self.len() - 1) as f64 * self.h
    }

    /// State vector at time `v`, by piecewise-cubic Hermite interpolation from
    /// the stored states and derivatives; clamped to the solved range.
    pub fn state_at(&self, v: f64) -> Vec<f64> {
        let last = self.len() - 1;
        if v <= 0.0 {
            return self.states[0].clone();
        }
        let s = v / self.h;
        let j = (s.floor() as usize).min(last - 1);
        let theta = (s - j as f64).clamp(0.0, 1.0);
        let (t2, t3) = (theta * theta, theta * theta * theta);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + theta;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let dim = self.states[0].len();
        let mut out = Vec::with_capacity(dim);
        for d in 0..dim {
            out.push(
                h00 * self.states[j][d]
                    + h10 * self.h * self.derivs[j][d]
                    + h01 * self.states[j + 1][d]
                    + h11 * self.h * self.derivs[j + 1][d],
            );
        }
        out
    }

    /// Checks the solve-quality contract: mass conserved within `1e-8` and no
    /// class fraction below `-1e-12` anywhere on the grid.
    pub fn validate(&self) -> Result<()> {
        for (j, state) in self.states.iter().enumerate() {
            let sum: f64 = state.iter().sum();
            if !(sum - 1.0).abs().is_finite() || (sum - 1.0).abs() > 1e-8 {
                return Err(Error::Instability(format!(
                    "mass {sum} at grid point {j} (t = {})",
                    j as f64 * self.h
                )));
            }
            if let Some(&worst) = state
                .iter()
                .min_by(|a, b| a.partial_cmp(b).unwrap())
            {
                if worst < -1e-12 {
                    return Err(Error::Instability(format!(
                        "class fraction {worst} at grid point {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Right-hand side of the master ODE at a state vector, exposed for direct
/// checks (e.g. the initial slope of `x_2` for any K=2 rule is exactly 1).
pub fn master_rhs(rule: &RuleTable, state: &[f64]) -> Vec<f64> {
    let polys = poly::drift_polynomials(rule);
    polys.iter().map(|p| poly::eval_f64(p, state)).collect()
}

/// Integrates the master ODE with classic fixed-step RK4.
///
/// The quadruple-sampling dynamics conserve total mass identically, and RK4
/// preserves that linear invariant to roundoff; a per-step sanity check aborts
/// with [`Error::Instability`] if the state degrades anyway.
pub fn solve_master_ode(rule: &RuleTable, horizon: f64, steps: usize) -> Result<OdeSolution> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
    }
    if steps < 16 {
        return Err(Error::Validation(format!("need at least 16 steps, got {steps}")));
    }
    let dim = usize::from(rule.k()) + 1;
    let polys = poly::drift_polynomials(rule);
    let lowered: Vec<Vec<(f64, [u8; 4])>> = polys.iter().map(lower).collect();
    let rhs = |x: &[f64], out: &mut [f64]| {
        for (slot, terms) in lowered.iter().enumerate() {
            let mut acc = 0.0;
            for (coeff, mono) in terms {
                acc += coeff
                    * x[usize::from(mono[0])]
                    * x[usize::from(mono[1])]
                    * x[usize::from(mono[2])]
                    * x[usize::from(mono[3])];
            }
            out[slot] = acc;
        }
    };

    let h = horizon / steps as f64;
    let mut state = vec![0.0; dim];
    state[0] = 1.0;

    let mut states = Vec::with_capacity(steps + 1);
    let mut derivs = Vec::with_capacity(steps + 1);
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    rhs(&state, &mut k1);
    states.push(state.clone());
    derivs.push(k1.clone());

    for step in 0..steps {
        rhs(&state, &mut k1);
        for d in 0..dim {
            tmp[d] = state[d] + 0.5 * h * k1[d];
        }
        rhs(&tmp, &mut k2);
        for d in 0..dim {
            tmp[d] = state[d] + 0.5 * h * k2[d];
        }
        rhs(&tmp, &mut k3);
        for d in 0..dim {
            tmp[d] = state[d] + h * k3[d];
        }
        rhs(&tmp, &mut k4);
        let mut sum = 0.0;
        for d in 0..dim {
            state[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            sum += state[d];
        }
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Instability(format!(
                "state left the simplex at step {} (t = {}), mass {sum}",
                step + 1,
                (step + 1) as f64 * h
            )));
        }
        rhs(&state, &mut k1);
        states.push(state.clone());
        derivs.push(k1.clone());
    }

    let sol = OdeSolution {
        rule_name: rule.name().to_string(),
        rule_fingerprint: rule.fingerprint(),
        k: rule.k(),
        h,
        states,
        derivs,
    };
    sol.validate()?;
    Ok(sol)
}

/// Rate functions on the solve grid, optionally `delta`-inflated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateProfile {
    pub rule_name: String,
    pub rule_fingerprint: u64,
    pub k: u8,
    pub h: f64,
    /// Uniform inflation already applied to every rate (0 for the plain profile).
    pub delta: f64,
    /// `a[i][j]`: merge rate into size `K+i+1` at grid point `j` (type index
    /// `i` is zero-based).
    pub a: Vec<Vec<f64>>,
    /// `c[i][j]`: attachment rate of size-`i+1` components at grid point `j`.
    pub c: Vec<Vec<f64>>,
    /// `b[j]`: normalized pair rate inside the unbounded phase.
    pub b: Vec<f64>,
}

impl RateProfile {
    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.b.len()
    }

    /// True when the profile has no grid points (never produced here).
    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Horizon covered by the grid.
    pub fn horizon(&self) -> f64 {
        (self.len() - 1) as f64 * self.h
    }

    /// Seed size of a cluster born with type index `i` (component size `K+i+1`).
    pub fn seed_size(&self, type_idx: usize) -> u32 {
        u32::from(self.k) + type_idx as u32 + 1
    }

    /// Merge rate `a_{i+1}` at time `v` (linear interpolation).
    pub fn a_at(&self, type_idx: usize, v: f64) -> f64 {
        gridfn::interp(self.h, &self.a[type_idx], v)
    }

    /// Attachment rate `c_{i+1}` at time `v`.
    pub fn c_at(&self, size_idx: usize, v: f64) -> f64 {
        gridfn::interp(self.h, &self.c[size_idx], v)
    }

    /// Inside-pair rate `b` at time `v`.
    pub fn b_at(&self, v: f64) -> f64 {
        gridfn::interp(self.h, &self.b, v)
    }

    /// Grid tabulation of the total attachment rate `sum_j c_j(u)`.
    pub fn total_c(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for row in &self.c {
            for (slot, v) in row.iter().enumerate() {
                out[slot] += v;
            }
        }
        out
    }
}

/// Derives the rate functions `a_i`, `c_i`, `b` from a solved hydrodynamic
/// trajectory.
///
/// The quotients `c_i = F_{i,w}/x_w` and `b = 2 F_{w,w}/x_w^2` are 0/0 at
/// `v = 0` and are filled there with their exact series limits; at `v > 0` an
/// unbounded-phase fraction below `1e-300` is reported as underflow.
pub fn rate_functions(rule: &RuleTable, sol: &OdeSolution) -> Result<RateProfile> {
    if sol.rule_fingerprint != rule.fingerprint() {
        return Err(Error::Validation(format!(
            "solution was produced by rule {:?}, not {:?}",
            sol.rule_name,
            rule.name()
        )));
    }
    let k = usize::from(rule.k());
    let (c_zero, b_zero) = taylor::rate_zero_limits(rule, 16)?;

    let a_polys: Vec<Vec<(f64, [u8; 4])>> = poly::a_polynomials(rule).iter().map(lower).collect();
    let c_polys: Vec<Vec<(f64, [u8; 4])>> =
        poly::c_numerator_polynomials(rule).iter().map(lower).collect();
    let b_poly = lower(&poly::b_numerator_polynomial(rule));

    let eval = |terms: &[(f64, [u8; 4])], x: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (coeff, mono) in terms {
            acc += coeff
                * x[usize::from(mono[0])]
                * x[usize::from(mono[1])]
                * x[usize::from(mono[2])]
                * x[usize::from(mono[3])];
        }
        acc
    };

    let n_pts = sol.len();
    let mut a = vec![vec![0.0; n_pts]; k];
    let mut c = vec![vec![0.0; n_pts]; k];
    let mut b = vec![0.0; n_pts];
    let mut x = vec![0.0; k + 1];

    for j in 0..n_pts {
        for d in 0..=k {
            // Post-solve tolerance admits dips to -1e-12; rates read them as 0.
            x[d] = sol.states[j][d].max(0.0);
        }
        let xw = x[k];
        for i in 0..k {
            a[i][j] = eval(&a_polys[i], &x).max(0.0);
        }
        if j == 0 {
            for i in 0..k {
                c[i][0] = c_zero[i].max(0.0);
            }
            b[0] = b_zero.max(0.0);
        } else {
            if xw < OMEGA_FLOOR {
                return Err(Error::Underflow(format!(
                    "x_w = {xw} at t = {} is below {OMEGA_FLOOR}; rate quotients undefined",
                    j as f64 * sol.h
                )));
            }
            for i in 0..k {
                c[i][j] = (eval(&c_polys[i], &x) / xw).max(0.0);
            }
            b[j] = (2.0 * eval(&b_poly, &x) / (xw * xw)).max(0.0);
        }
    }

    Ok(RateProfile {
        rule_name: rule.name().to_string(),
        rule_fingerprint: rule.fingerprint(),
        k: rule.k(),
        h: sol.h,
        delta: 0.0,
        a,
        c,
        b,
    })
}

/// Adds a uniform `delta` to every rate, the regularization that keeps the
/// cluster measure bounded away from degeneracy near time zero.
pub fn inflate_rates(profile: &RateProfile, delta: f64) -> Result<RateProfile> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::Validation(format!(
            "inflation must be finite and nonnegative, got {delta}"
        )));
    }
    let mut out = profile.clone();
    out.delta = profile.delta + delta;
    for row in out.a.iter_mut().chain(out.c.iter_mut()) {
        for v in row.iter_mut() {
            *v += delta;
        }
    }
    for v in out.b.iter_mut() {
        *v += delta;
    }
    Ok(out)
}

/// Inflation schedule `delta_n = n^{-gamma}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Exponent in `(0, 1/2)`; the Bohman-Frieze analysis wants `(1/3, 1/2)`.
    pub gamma: f64,
}

impl PerturbationConfig {
    pub fn new(gamma: f64) -> Result<PerturbationConfig> {
        if !(gamma > 0.0 && gamma < 0.5) {
            return Err(Error::Validation(format!(
                "gamma must lie in (0, 1/2), got {gamma}"
            )));
        }
        Ok(PerturbationConfig { gamma })
    }

    /// Inflation used at system size `n`.
    pub fn delta_n(&self, n: u64) -> f64 {
        (n as f64).powf(-self.gamma)
    }
}
