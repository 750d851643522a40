//! Operator-norm machinery for the cluster kernel and the critical time.
//!
//! A cluster born at time `s` with type index `i` (seed size `K+i+1`) grows by
//! absorbing bounded components: its size `W` jumps by `j` at rate
//! `W * c_j(u)`.  Writing `lambda = sum_j j c_j` and `kappa = sum_j j^2 c_j`,
//! the first two moments obey linear ODEs with closed integrating-factor
//! solutions in terms of `L(u) = int_0^u lambda`:
//!
//! * `m_{i,s}(u) = seed * exp(L(u) - L(s))`,
//! * `q_{i,s}(u) = exp(2(L(u)-L(s))) * seed * (seed + exp(L(s)) * (Kc(u) - Kc(s)))`
//!   with `Kc(u) = int_0^u kappa exp(-L)`,
//!
//! and the cross moment is `E[W(u)W(u')] = q(u & u') * exp(L(u | u') - L(u & u'))`.
//!
//! The pairing kernel `int_0^v w_x(u) w_y(u) b(u) du` is a Gram kernel in the
//! weighted space `L^2([0, v], b du)`, so the operator on cluster space has the
//! same nonzero spectrum as the *time-domain* operator with symmetrized kernel
//! `H(u,u') = sqrt(b(u)) S(u,u') sqrt(b(u'))`, where
//! `S(u,u') = sum_i int_0^{u & u'} a_i(s) E[W(u)W(u')] ds`.  That double
//! integral collapses to prefix integrals of the rates, so building the
//! Nystrom matrix costs O(1) per entry.  The operator norm `rho_v` is the top
//! eigenvalue, computed by power iteration with trapezoid nodes and a
//! Richardson estimate from grids of size N and 2N.  `rho_v` grows strictly in
//! `v`; the critical time is the root of `rho_v = 1`, found by bisection after
//! a horizon bootstrap.

use serde::{Deserialize, Serialize};

use crate::hydro::{self, OdeSolution, RateProfile};
use crate::rules::RuleTable;
use crate::{gridfn, Error, Result};

/// Relative convergence tolerance of the power iteration.
pub const EIG_TOL: f64 = 1e-10;

/// Power-iteration cap before reporting non-convergence.
const MAX_POWER_ITERS: usize = 100_000;

/// Richardson pairs start at this node count.
pub const DEFAULT_NYSTROM_N: usize = 512;

/// Largest node count the refinement ladder will try.
const MAX_NYSTROM_N: usize = 2048;

/// Coarse/fine Nystrom estimates must agree this well before the Richardson
/// value is trusted.
const QUADRATURE_AGREEMENT: f64 = 1e-4;

/// Guard on `int_0^T lambda`: beyond this the squared growth factors overflow.
const LOG_GROWTH_GUARD: f64 = 300.0;

/// Precomputed cluster-moment data on the profile grid.
///
/// Everything needed to evaluate means, second moments, and the kernel
/// diagonal data `D(u) = sum_i int_0^u a_i(s) q_{i,s}(u) ds` in O(1) per
/// query, by combining prefix trapezoid integrals of the rates.
#[derive(Clone, Debug)]
pub struct MomentField {
    pub k: u8,
    pub h: f64,
    pub delta: f64,
    /// `lambda(u) = sum_j j c_j(u)` on the grid.
    pub lambda: Vec<f64>,
    /// `kappa(u) = sum_j j^2 c_j(u)` on the grid.
    pub kappa: Vec<f64>,
    /// `L(u) = int_0^u lambda`.
    big_l: Vec<f64>,
    /// `Kc(u) = int_0^u kappa exp(-L)`.
    kc: Vec<f64>,
    /// `D(u) = sum_i int_0^u a_i(s) q_{i,s}(u) ds` tabulated on the grid.
    d_total: Vec<f64>,
    /// Copy of the profile's pair rate `b`, for kernel assembly.
    b: Vec<f64>,
}

impl MomentField {
    /// Builds the field from a (possibly inflated) rate profile.
    pub fn new(profile: &RateProfile) -> Result<MomentField> {
        let k = usize::from(profile.k);
        let n = profile.len();
        let h = profile.h;

        let mut lambda = vec![0.0; n];
        let mut kappa = vec![0.0; n];
        for (j_idx, row) in profile.c.iter().enumerate() {
            let size = (j_idx + 1) as f64;
            for (slot, v) in row.iter().enumerate() {
                lambda[slot] += size * v;
                kappa[slot] += size * size * v;
            }
        }
        let big_l = gridfn::prefix_trapezoid(h, &lambda);
        if *big_l.last().unwrap() > LOG_GROWTH_GUARD {
            return Err(Error::Overflow(format!(
                "int lambda = {} over the horizon exceeds {LOG_GROWTH_GUARD}",
                big_l.last().unwrap()
            )));
        }

        let exp_neg_l: Vec<f64> = big_l.iter().map(|l| (-l).exp()).collect();
        let kappa_weighted: Vec<f64> = kappa
            .iter()
            .zip(&exp_neg_l)
            .map(|(kp, e)| kp * e)
            .collect();
        let kc = gridfn::prefix_trapezoid(h, &kappa_weighted);

        let mut a2 = Vec::with_capacity(k);
        let mut a1 = Vec::with_capacity(k);
        let mut ak = Vec::with_capacity(k);
        for row in &profile.a {
            let w2: Vec<f64> = row
                .iter()
                .zip(&exp_neg_l)
                .map(|(a, e)| a * e * e)
                .collect();
            let w1: Vec<f64> = row
                .iter()
                .zip(&exp_neg_l)
                .map(|(a, e)| a * e)
                .collect();
            let wk: Vec<f64> = w1.iter().zip(&kc).map(|(w, kcv)| w * kcv).collect();
            a2.push(gridfn::prefix_trapezoid(h, &w2));
            a1.push(gridfn::prefix_trapezoid(h, &w1));
            ak.push(gridfn::prefix_trapezoid(h, &wk));
        }

        let mut d_total = vec![0.0; n];
        for slot in 0..n {
            let growth2 = (2.0 * big_l[slot]).exp();
            let mut acc = 0.0;
            for i in 0..k {
                let seed = f64::from(profile.seed_size(i));
                acc += growth2
                    * (seed * seed * a2[i][slot]
                        + seed * (kc[slot] * a1[i][slot] - ak[i][slot]));
            }
            d_total[slot] = acc;
        }

        Ok(MomentField {
            k: profile.k,
            h,
            delta: profile.delta,
            lambda,
            kappa,
            big_l,
            kc,
            d_total,
            b: profile.b.clone(),
        })
    }

    /// Horizon covered by the field.
    pub fn horizon(&self) -> f64 {
        (self.big_l.len() - 1) as f64 * self.h
    }

    /// `L(u) = int_0^u lambda`, interpolated.
    pub fn big_l_at(&self, u: f64) -> f64 {
        gridfn::interp(self.h, &self.big_l, u)
    }

    /// Mean size at `u` of a cluster of type index `i` born at `s` (0 before birth).
    pub fn mean(&self, type_idx: usize, s: f64, u: f64) -> f64 {
        if u < s {
            return 0.0;
        }
        let seed = f64::from(self.k) + type_idx as f64 + 1.0;
        seed * (self.big_l_at(u) - self.big_l_at(s)).exp()
    }

    /// Second moment of the same cluster size at `u >= s`.
    pub fn second_moment(&self, type_idx: usize, s: f64, u: f64) -> f64 {
        if u < s {
            return 0.0;
        }
        let seed = f64::from(self.k) + type_idx as f64 + 1.0;
        let ls = self.big_l_at(s);
        let lu = self.big_l_at(u);
        let kcs = gridfn::interp(self.h, &self.kc, s);
        let kcu = gridfn::interp(self.h, &self.kc, u);
        (2.0 * (lu - ls)).exp() * seed * (seed + ls.exp() * (kcu - kcs))
    }

    /// Cross moment `E[W(u) W(u')]` of the same cluster.
    pub fn cross_moment(&self, type_idx: usize, s: f64, u: f64, u2: f64) -> f64 {
        let (lo, hi) = if u <= u2 { (u, u2) } else { (u2, u) };
        if lo < s {
            return 0.0;
        }
        self.second_moment(type_idx, s, lo) * (self.big_l_at(hi) - self.big_l_at(lo)).exp()
    }

    /// Kernel diagonal data `D(u)`, interpolated.
    pub fn d_total_at(&self, u: f64) -> f64 {
        gridfn::interp(self.h, &self.d_total, u)
    }

    /// Pair rate `b(u)`, interpolated.
    pub fn b_at(&self, u: f64) -> f64 {
        gridfn::interp(self.h, &self.b, u)
    }
}

/// Symmetrized Nystrom discretization of the time-domain kernel on `[0, v]`.
#[derive(Clone, Debug)]
pub struct KernelGrid {
    pub v: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row-major `n x n` symmetric nonnegative matrix
    /// `sqrt(w_t) H(u_t, u_s) sqrt(w_s)`.
    pub matrix: Vec<f64>,
}

impl KernelGrid {
    /// Assembles the weighted kernel matrix with `n` uniform trapezoid nodes.
    pub fn assemble(field: &MomentField, v: f64, n: usize) -> Result<KernelGrid> {
        if n < 64 {
            return Err(Error::Validation(format!("need at least 64 nodes, got {n}")));
        }
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Validation(format!("evaluation time must be >= 0, got {v}")));
        }
        if v > field.horizon() + 1e-12 {
            return Err(Error::Validation(format!(
                "evaluation time {v} beyond solved horizon {}",
                field.horizon()
            )));
        }
        let step = v / (n - 1) as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for t in 0..n {
            nodes.push(step * t as f64);
            let w = if t == 0 || t == n - 1 { 0.5 * step } else { step };
            weights.push(w);
        }
        // Per-node data; nodes are sorted so min/max reduce to index order.
        let mut d = Vec::with_capacity(n);
        let mut exp_l = Vec::with_capacity(n);
        let mut sqrt_bw = Vec::with_capacity(n);
        for t in 0..n {
            d.push(field.d_total_at(nodes[t]));
            exp_l.push(field.big_l_at(nodes[t]).exp());
            sqrt_bw.push((field.b_at(nodes[t]).max(0.0) * weights[t]).sqrt());
        }
        let mut matrix = vec![0.0; n * n];
        for t in 0..n {
            for s in t..n {
                // S(u_t, u_s) = D(u_t) * exp(L(u_s) - L(u_t)) for t <= s.
                let val = sqrt_bw[t] * sqrt_bw[s] * d[t] * (exp_l[s] / exp_l[t]);
                matrix[t * n + s] = val;
                matrix[s * n + t] = val;
            }
        }
        Ok(KernelGrid {
            v,
            nodes,
            weights,
            matrix,
        })
    }

    /// Top eigenvalue by power iteration from a deterministic positive start.
    pub fn top_eigenvalue(&self) -> Result<f64> {
        let n = self.nodes.len();
        let mut x = vec![1.0 / (n as f64).sqrt(); n];
        let mut y = vec![0.0; n];
        let mut prev = f64::INFINITY;
        for _ in 0..MAX_POWER_ITERS {
            // y = A x
            for (t, slot) in y.iter_mut().enumerate() {
                let row = &self.matrix[t * n..(t + 1) * n];
                let mut acc = 0.0;
                for (s, m) in row.iter().enumerate() {
                    acc += m * x[s];
                }
                *slot = acc;
            }
            // Rayleigh quotient with normalized x.
            let lambda: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(0.0); // zero operator
            }
            for (slot, v) in x.iter_mut().zip(&y) {
                *slot = v / norm;
            }
            if (lambda - prev).abs() <= EIG_TOL * lambda.abs().max(1e-16) {
                return Ok(lambda.max(0.0));
            }
            prev = lambda;
        }
        Err(Error::NonConvergence(format!(
            "power iteration did not settle in {MAX_POWER_ITERS} iterations at v = {}",
            self.v
        )))
    }
}

/// Operator norm estimate with its quadrature diagnostics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OperatorNorm {
    /// Richardson-extrapolated value from the (n, 2n) trapezoid pair.
    pub rho: f64,
    /// Raw value on the coarse grid.
    pub rho_coarse: f64,
    /// Raw value on the fine grid.
    pub rho_fine: f64,
    /// Coarse node count actually used.
    pub n_used: usize,
}

/// Operator norm `rho_v` of the pairing kernel at time `v`.
///
/// Runs the (n, 2n) trapezoid pair and Richardson-extrapolates; if the pair
/// disagrees by more than `1e-4` the node count doubles (up to 2048 coarse
/// nodes) before giving up.
pub fn operator_norm(field: &MomentField, v: f64, n: usize) -> Result<OperatorNorm> {
    if v <= 0.0 {
        return Ok(OperatorNorm {
            rho: 0.0,
            rho_coarse: 0.0,
            rho_fine: 0.0,
            n_used: n,
        });
    }
    let mut n_cur = n.max(64);
    loop {
        let coarse = KernelGrid::assemble(field, v, n_cur)?.top_eigenvalue()?;
        let fine = KernelGrid::assemble(field, v, 2 * n_cur)?.top_eigenvalue()?;
        if (fine - coarse).abs() <= QUADRATURE_AGREEMENT {
            return Ok(OperatorNorm {
                rho: fine + (fine - coarse) / 3.0,
                rho_coarse: coarse,
                rho_fine: fine,
                n_used: n_cur,
            });
        }
        if 2 * n_cur > MAX_NYSTROM_N {
            return Err(Error::NonConvergence(format!(
                "trapezoid pair ({n_cur}, {}) still disagrees by {} at v = {v}",
                2 * n_cur,
                (fine - coarse).abs()
            )));
        }
        n_cur *= 2;
    }
}

/// Gap `1 - rho_v` of the (possibly inflated) profile at time `v`.
pub fn gap(field: &MomentField, v: f64, n: usize) -> Result<f64> {
    Ok(1.0 - operator_norm(field, v, n)?.rho)
}

/// Norm samples along a time grid, for profile plots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub delta: f64,
    /// `(v, rho_v)` samples in increasing `v`.
    pub samples: Vec<(f64, f64)>,
}

/// Samples `rho_v` on an increasing list of evaluation times.
pub fn spectral_profile(field: &MomentField, times: &[f64], n: usize) -> Result<SpectralProfile> {
    let mut samples = Vec::with_capacity(times.len());
    for &v in times {
        samples.push((v, operator_norm(field, v, n)?.rho));
    }
    Ok(SpectralProfile {
        delta: field.delta,
        samples,
    })
}

/// Everything the critical-time solve reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalReport {
    pub rule_name: String,
    /// Root of `rho_v = 1`.
    pub t_c: f64,
    /// Final bisection bracket width.
    pub bracket_width: f64,
    /// Fitted slope of the gap: `(1 - rho_u)/(t_c - u) -> eta` as `u -> t_c`.
    pub eta: f64,
    /// Spread (max - min) of the gap-slope samples behind `eta`.
    pub eta_spread: f64,
    /// Horizon of the final solve (twice the bootstrap estimate).
    pub horizon: f64,
    /// ODE steps used on the final horizon.
    pub steps: usize,
    /// Coarse Nystrom nodes used for norm evaluations.
    pub nystrom_n: usize,
    /// Inflation under which the root was found (0 = plain rates).
    pub delta: f64,
}

/// Options for [`critical_time`].
#[derive(Clone, Copy, Debug)]
pub struct CriticalOptions {
    /// ODE steps per solve.
    pub steps: usize,
    /// Coarse Nystrom node count.
    pub nystrom_n: usize,
    /// Bisection stops at this bracket width.
    pub bisect_tol: f64,
    /// Inflation applied before the norm machinery (usually 0).
    pub delta: f64,
}

impl Default for CriticalOptions {
    fn default() -> Self {
        CriticalOptions {
            steps: hydro::DEFAULT_STEPS,
            nystrom_n: DEFAULT_NYSTROM_N,
            bisect_tol: 1e-6,
            delta: 0.0,
        }
    }
}

fn field_on_horizon(
    rule: &RuleTable,
    horizon: f64,
    opts: &CriticalOptions,
) -> Result<(OdeSolution, RateProfile, MomentField)> {
    let sol = hydro::solve_master_ode(rule, horizon, opts.steps)?;
    let mut profile = hydro::rate_functions(rule, &sol)?;
    if opts.delta > 0.0 {
        profile = hydro::inflate_rates(&profile, opts.delta)?;
    }
    let field = MomentField::new(&profile)?;
    Ok((sol, profile, field))
}

fn bisect_root(field: &MomentField, opts: &CriticalOptions) -> Result<(f64, f64)> {
    let horizon = field.horizon();
    // Coarse scan for the sign change of rho - 1; rho grows strictly in v.
    let scan = 16;
    let mut lo = 0.0;
    let mut hi = f64::NAN;
    for t in 1..=scan {
        let v = horizon * t as f64 / scan as f64;
        let rho = operator_norm(field, v, opts.nystrom_n)?.rho;
        if rho < 1.0 {
            lo = v;
        } else {
            hi = v;
            break;
        }
    }
    if !hi.is_finite() {
        return Err(Error::HorizonTooShort(format!(
            "rho stays below 1 up to the horizon {horizon}"
        )));
    }
    while hi - lo > opts.bisect_tol {
        let mid = 0.5 * (lo + hi);
        let rho = operator_norm(field, mid, opts.nystrom_n)?.rho;
        if rho < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi), hi - lo))
}

/// Critical time of a rule: solve, locate `rho_v = 1`, re-solve on a horizon
/// matched to the estimate, re-locate, and fit the gap slope `eta`.
///
/// Returns the report together with the final solution and profile so callers
/// can reuse them without re-solving.
pub fn critical_time(
    rule: &RuleTable,
    opts: &CriticalOptions,
) -> Result<(CriticalReport, OdeSolution, RateProfile)> {
    // Bootstrap pass: provisional horizon, doubled until the root is inside.
    let mut horizon = hydro::BOOTSTRAP_HORIZON;
    let mut bootstrap = None;
    for _ in 0..3 {
        let (_, _, field) = field_on_horizon(rule, horizon, opts)?;
        match bisect_root(&field, opts) {
            Ok((root, _)) => {
                bootstrap = Some(root);
                break;
            }
            Err(Error::HorizonTooShort(_)) => horizon *= 2.0,
            Err(e) => return Err(e),
        }
    }
    let bootstrap = bootstrap.ok_or_else(|| {
        Error::HorizonTooShort(format!(
            "no root of rho = 1 found up to horizon {horizon}"
        ))
    })?;

    // Final pass on a horizon proportioned to the estimate.
    let final_horizon = 2.0 * bootstrap;
    let (sol, profile, field) = field_on_horizon(rule, final_horizon, opts)?;
    let (t_c, bracket_width) = bisect_root(&field, opts)?;

    // Gap slope: sample (1 - rho_u)/(t_c - u) on log-spaced distances in
    // [1e-3, 1e-1] and extrapolate linearly to distance zero.
    let mut ds = Vec::new();
    let mut gs = Vec::new();
    let n_pts = 8;
    for t in 0..n_pts {
        let d = 0.1 * (0.01_f64).powf(t as f64 / (n_pts - 1) as f64);
        let u = t_c - d;
        if u <= 0.0 {
            continue;
        }
        let rho = operator_norm(&field, u, opts.nystrom_n)?.rho;
        ds.push(d);
        gs.push((1.0 - rho) / d);
    }
    let (eta, eta_spread) = if ds.len() >= 2 {
        let m = ds.len() as f64;
        let sx: f64 = ds.iter().sum();
        let sy: f64 = gs.iter().sum();
        let sxx: f64 = ds.iter().map(|d| d * d).sum();
        let sxy: f64 = ds.iter().zip(&gs).map(|(d, g)| d * g).sum();
        let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        let intercept = (sy - slope * sx) / m;
        let spread = gs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - gs.iter().cloned().fold(f64::INFINITY, f64::min);
        (intercept, spread)
    } else {
        (f64::NAN, f64::NAN)
    };

    let report = CriticalReport {
        rule_name: rule.name().to_string(),
        t_c,
        bracket_width,
        eta,
        eta_spread,
        horizon: sol.horizon(),
        steps: opts.steps,
        nystrom_n: opts.nystrom_n,
        delta: opts.delta,
    };
    Ok((report, sol, profile))
}

/// One row of a perturbation scan.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub delta: f64,
    pub rho_delta: f64,
    /// `rho_delta - rho_0` (nonnegative: inflation grows the operator).
    pub diff: f64,
}

/// Result of scanning the operator norm in the inflation parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationScan {
    pub v: f64,
    pub rho_base: f64,
    pub rows: Vec<PerturbationRow>,
    /// Least-squares slope of `log diff` against `log delta`.
    pub slope: f64,
    /// Set when any difference sits below 10x the eigenvalue tolerance, where
    /// the slope cannot be trusted.
    pub inconclusive: bool,
}

/// Scans `rho_{v,delta}` over a list of inflations and fits the log-log decay
/// slope of `rho_{v,delta} - rho_v`.
///
/// Each inflated norm is recomputed from a freshly inflated profile rather
/// than by perturbing cached arrays.
pub fn perturbation_scan(
    profile: &RateProfile,
    v: f64,
    deltas: &[f64],
    n: usize,
) -> Result<PerturbationScan> {
    if deltas.len() < 2 {
        return Err(Error::Validation(
            "perturbation scan needs at least two inflation values".into(),
        ));
    }
    if deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::Validation("inflation values must be positive".into()));
    }
    let base_field = MomentField::new(profile)?;
    let rho_base = operator_norm(&base_field, v, n)?.rho;

    let mut rows = Vec::with_capacity(deltas.len());
    let mut inconclusive = false;
    for &delta in deltas {
        let inflated = hydro::inflate_rates(profile, delta)?;
        let field = MomentField::new(&inflated)?;
        let rho_delta = operator_norm(&field, v, n)?.rho;
        let diff = rho_delta - rho_base;
        if diff.abs() < 10.0 * EIG_TOL {
            inconclusive = true;
        }
        rows.push(PerturbationRow {
            delta,
            rho_delta,
            diff,
        });
    }

    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.diff > 0.0)
        .map(|r| (r.delta.ln(), r.diff.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (m * sxy - sx * sy) / (m * sxx - sx * sx)
    } else {
        inconclusive = true;
        f64::NAN
    };

    Ok(PerturbationScan {
        v,
        rho_base,
        rows,
        slope,
        inconclusive,
    })
}
