//! Multitype continuum branching process dominating the cluster exploration.
//!
//! A node is a cluster trajectory `x`.  Its children arrive as a Poisson
//! process over points `y = (type i, birth s1)` with intensity
//! `a_i(s1) * int_{s1}^t w_x(u) E[W_y(u)] b(u) du`, the pairing kernel against
//! the mean cluster; the child's own path is the size-biased trajectory.
//! Using `m_{i,s1}(u) = (K+i) exp(L(u) - L(s1))` the total offspring
//! intensity collapses to prefix integrals:
//!
//! `Lambda(x) = sum_i (K+i) int_0^t a_i(s1) e^{-L(s1)} (R_x(t) - R_x(s1)) ds1`
//!
//! with `R_x(u) = int_0^u w_x e^L b`.  Child trajectories are drawn by
//! rejection: propose a plain cluster from its birth law and accept with
//! probability proportional to `int w_x W b` over the mean version, under an
//! adaptive envelope cap whose overflow frequency is reported (overflow
//! redraws bias the law slightly; the diagnostics bound that bias).
//!
//! Total progeny is explored breadth-first and scored by the volume
//! `phi_t(x) = w_x(t)`; subcritical tails are summarized by a fitted
//! exponential decay rate of the survival function.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::hydro::RateProfile;
use crate::rgiva::{grow_cluster, pair_interaction, ClusterTrajectory};
use crate::{gridfn, Error, Result};

/// Initial rejection envelope; doubles whenever a proposal overflows it.
const INITIAL_ENVELOPE: f64 = 4.0;

/// Default progeny volume cap per sample is `1e6 * (K + 1)`.
pub fn default_progeny_cap(k: u8) -> f64 {
    1e6 * (f64::from(k) + 1.0)
}

/// Counters for the size-biased rejection sampler.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub proposals: u64,
    pub accepted: u64,
    pub cap_hits: u64,
    pub envelope: f64,
}

impl SamplerDiagnostics {
    /// Fraction of proposals that overflowed the envelope.
    pub fn cap_hit_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.cap_hits as f64 / self.proposals as f64
        }
    }

    /// A cap-hit rate above 1% means the size-biased law is being distorted
    /// beyond the documented tolerance.
    pub fn warning(&self) -> Option<String> {
        (self.cap_hit_rate() > 0.01).then(|| {
            format!(
                "rejection envelope overflowed on {:.2}% of proposals; child law biased",
                100.0 * self.cap_hit_rate()
            )
        })
    }
}

/// Offspring law of one node: per-type intensities and birth densities.
#[derive(Clone, Debug)]
pub struct OffspringLaw {
    /// Total intensity `Lambda(x)`.
    pub total: f64,
    /// Per-type intensity.
    pub per_type: Vec<f64>,
    /// Per-type prefix integrals of the (unnormalized) birth density.
    density_prefix: Vec<Vec<f64>>,
}

/// One total-progeny draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProgenySample {
    /// Total volume over all generations.
    pub total_volume: f64,
    /// Volume per generation, root first.
    pub generation_volumes: Vec<f64>,
    /// Nodes expanded.
    pub nodes: u64,
    /// True when the volume cap stopped the expansion.
    pub truncated: bool,
}

/// Branching sampler bound to one (possibly inflated) profile and horizon.
pub struct BranchingSampler<'a> {
    profile: &'a RateProfile,
    t: f64,
    /// `L` on the grid.
    big_l: Vec<f64>,
    exp_l: Vec<f64>,
    exp_neg_l: Vec<f64>,
    b_prefix: Vec<f64>,
    envelope: f64,
    diagnostics: SamplerDiagnostics,
}

impl<'a> BranchingSampler<'a> {
    pub fn new(profile: &'a RateProfile, t: f64) -> Result<BranchingSampler<'a>> {
        if !(t > 0.0 && t <= profile.horizon() + 1e-12) {
            return Err(Error::Validation(format!(
                "evaluation time {t} outside (0, {}]",
                profile.horizon()
            )));
        }
        let len = profile.len();
        let mut lambda = vec![0.0; len];
        for (j_idx, row) in profile.c.iter().enumerate() {
            let size = (j_idx + 1) as f64;
            for (slot, v) in row.iter().enumerate() {
                lambda[slot] += size * v;
            }
        }
        let big_l = gridfn::prefix_trapezoid(profile.h, &lambda);
        let exp_l: Vec<f64> = big_l.iter().map(|l| l.exp()).collect();
        let exp_neg_l: Vec<f64> = big_l.iter().map(|l| (-l).exp()).collect();
        let b_prefix = gridfn::prefix_trapezoid(profile.h, &profile.b);
        Ok(BranchingSampler {
            profile,
            t,
            big_l,
            exp_l,
            exp_neg_l,
            b_prefix,
            envelope: INITIAL_ENVELOPE,
            diagnostics: SamplerDiagnostics {
                envelope: INITIAL_ENVELOPE,
                ..Default::default()
            },
        })
    }

    pub fn diagnostics(&self) -> SamplerDiagnostics {
        SamplerDiagnostics {
            envelope: self.envelope,
            ..self.diagnostics
        }
    }

    /// `R_x(u) = int_0^u w_x e^L b` on the grid.
    fn pairing_prefix(&self, x: &ClusterTrajectory) -> Vec<f64> {
        let h = self.profile.h;
        let len = self.profile.len();
        let mut values = vec![0.0; len];
        let mut w = 0.0;
        let mut jump_iter = x.jumps.iter().peekable();
        for (slot, value) in values.iter_mut().enumerate() {
            let u = slot as f64 * h;
            if w == 0.0 && u >= x.birth {
                w = f64::from(x.seed);
            }
            while let Some(&&(tau, j)) = jump_iter.peek() {
                if tau <= u {
                    w += f64::from(j);
                    jump_iter.next();
                } else {
                    break;
                }
            }
            if w > 0.0 {
                *value = w * self.exp_l[slot] * self.profile.b[slot];
            }
        }
        gridfn::prefix_trapezoid(h, &values)
    }

    /// Offspring intensity and birth densities of node `x`.
    pub fn offspring_law(&self, x: &ClusterTrajectory) -> OffspringLaw {
        let h = self.profile.h;
        let len = self.profile.len();
        let k = usize::from(self.profile.k);
        let r_prefix = self.pairing_prefix(x);
        let r_t = gridfn::interp(h, &r_prefix, self.t);
        let mut per_type = Vec::with_capacity(k);
        let mut density_prefix = Vec::with_capacity(k);
        let mut total = 0.0;
        for i in 0..k {
            let seed = f64::from(self.profile.seed_size(i));
            let mut density = vec![0.0; len];
            for slot in 0..len {
                let remaining = (r_t - r_prefix[slot]).max(0.0);
                density[slot] =
                    seed * self.profile.a[i][slot] * self.exp_neg_l[slot] * remaining;
            }
            let prefix = gridfn::prefix_trapezoid(h, &density);
            let mass = gridfn::integral_between(h, &prefix, 0.0, self.t);
            per_type.push(mass);
            total += mass;
            density_prefix.push(prefix);
        }
        OffspringLaw {
            total,
            per_type,
            density_prefix,
        }
    }

    /// Offspring intensity `Lambda(x)` alone.
    pub fn offspring_intensity(&self, x: &ClusterTrajectory) -> f64 {
        self.offspring_law(x).total
    }

    /// Draws the size-biased child trajectory for a child of `x` of the given
    /// type and birth time.
    fn sample_child_trajectory<R: Rng + ?Sized>(
        &mut self,
        x: &ClusterTrajectory,
        x_pairing: &[f64],
        type_idx: usize,
        birth: f64,
        rng: &mut R,
    ) -> Result<ClusterTrajectory> {
        let h = self.profile.h;
        let seed = f64::from(self.profile.seed_size(type_idx));
        // Mean-version weight: (K+i) e^{-L(s1)} (R_x(t) - R_x(s1)).
        let r_t = gridfn::interp(h, x_pairing, self.t);
        let r_s = gridfn::interp(h, x_pairing, birth);
        let mean_weight =
            seed * (-gridfn::interp(h, &self.big_l, birth)).exp() * (r_t - r_s).max(0.0);
        if mean_weight <= 0.0 {
            // Degenerate birth at the boundary: the plain law is as good as
            // the size-biased one (the pairing window is empty).
            return grow_cluster(self.profile, type_idx, birth, self.t, rng);
        }
        loop {
            self.diagnostics.proposals += 1;
            let proposal = grow_cluster(self.profile, type_idx, birth, self.t, rng)?;
            let alpha = pair_interaction(x, &proposal, h, &self.b_prefix, self.t);
            let ratio = alpha / mean_weight;
            if ratio > self.envelope {
                self.diagnostics.cap_hits += 1;
                self.envelope *= 2.0;
                continue;
            }
            if rng.gen::<f64>() < ratio / self.envelope {
                self.diagnostics.accepted += 1;
                return Ok(proposal);
            }
        }
    }

    /// Samples the full child list of node `x`.
    pub fn sample_children<R: Rng + ?Sized>(
        &mut self,
        x: &ClusterTrajectory,
        rng: &mut R,
    ) -> Result<Vec<ClusterTrajectory>> {
        let law = self.offspring_law(x);
        if law.total <= 0.0 {
            return Ok(Vec::new());
        }
        let count = Poisson::new(law.total)
            .map_err(|e| Error::Validation(format!("bad offspring intensity: {e}")))?
            .sample(rng) as u64;
        if count == 0 {
            return Ok(Vec::new());
        }
        let x_pairing = self.pairing_prefix(x);
        let mut children = Vec::with_capacity(count as usize);
        for _ in 0..count {
            // Type proportional to its intensity share.
            let mut pick = rng.gen::<f64>() * law.total;
            let mut type_idx = 0;
            for (i, mass) in law.per_type.iter().enumerate() {
                type_idx = i;
                if pick < *mass {
                    break;
                }
                pick -= mass;
            }
            let birth = gridfn::sample_by_density(
                self.profile.h,
                &law.density_prefix[type_idx],
                self.t,
                rng.gen::<f64>(),
            )
            .expect("type was chosen with positive mass");
            children.push(self.sample_child_trajectory(x, &x_pairing, type_idx, birth, rng)?);
        }
        Ok(children)
    }

    /// Breadth-first total progeny from a root of the top type born at 0.
    pub fn total_progeny<R: Rng + ?Sized>(
        &mut self,
        cap: f64,
        rng: &mut R,
    ) -> Result<ProgenySample> {
        let root_type = usize::from(self.profile.k) - 1;
        let root = grow_cluster(self.profile, root_type, 0.0, self.t, rng)?;
        let mut total = f64::from(root.size_at(self.t));
        let mut generation_volumes = vec![total];
        let mut nodes = 1u64;
        let mut truncated = false;
        let mut frontier = vec![root];
        'expand: while !frontier.is_empty() {
            let mut next = Vec::new();
            let mut volume = 0.0;
            for x in &frontier {
                let children = self.sample_children(x, rng)?;
                for child in children {
                    nodes += 1;
                    total += f64::from(child.size_at(self.t));
                    volume += f64::from(child.size_at(self.t));
                    next.push(child);
                    if total > cap {
                        truncated = true;
                        if volume > 0.0 {
                            generation_volumes.push(volume);
                        }
                        break 'expand;
                    }
                }
            }
            if volume > 0.0 {
                generation_volumes.push(volume);
            }
            frontier = next;
        }
        Ok(ProgenySample {
            total_volume: total,
            generation_volumes,
            nodes,
            truncated,
        })
    }
}

/// Exponential tail fit of total-progeny samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailFit {
    /// Decay rate of `P(G > m)` over the upper decade (positive when the
    /// tail falls).
    pub rate: f64,
    /// Bootstrap percentile interval for the rate.
    pub rate_ci: (f64, f64),
    /// Fit points used.
    pub points: usize,
    /// All samples equal: the survival has no tail to fit.
    pub degenerate: bool,
}

/// Minimum sample count for a tail fit.
pub const TAIL_MIN_SAMPLES: usize = 10_000;

/// Fits the exponential decay rate of the empirical survival of `samples`
/// over its upper decade `[max/10, max)`, with a bootstrap CI.
pub fn tail_rate<R: Rng + ?Sized>(samples: &[f64], rng: &mut R) -> Result<TailFit> {
    if samples.len() < TAIL_MIN_SAMPLES {
        return Err(Error::Validation(format!(
            "tail fit needs at least {TAIL_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max.is_finite() && min.is_finite()) {
        return Err(Error::Validation("non-finite progeny samples".into()));
    }
    if max == min {
        return Ok(TailFit {
            rate: f64::INFINITY,
            rate_ci: (f64::INFINITY, f64::INFINITY),
            points: 0,
            degenerate: true,
        });
    }
    let rate = fit_rate(samples, max)?;
    // Percentile bootstrap over resampled data sets.
    let b = 200;
    let mut rates = Vec::with_capacity(b);
    for _ in 0..b {
        let resample: Vec<f64> = (0..samples.len())
            .map(|_| samples[rng.gen_range(0..samples.len())])
            .collect();
        let m = resample.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if let Ok(r) = fit_rate(&resample, m) {
            rates.push(r);
        }
    }
    if rates.len() < b / 2 {
        return Err(Error::Inconclusive(
            "tail fit unstable under resampling".into(),
        ));
    }
    rates.sort_unstable_by(f64::total_cmp);
    let lo = rates[(rates.len() as f64 * 0.025) as usize];
    let hi = rates[((rates.len() as f64 * 0.975) as usize).min(rates.len() - 1)];
    let points = tail_points(samples, max).len();
    Ok(TailFit {
        rate,
        rate_ci: (lo, hi),
        points,
        degenerate: false,
    })
}

/// Fit abscissae: unique sample values in the upper decade with at least five
/// exceedances (survival still resolved by the sample).
fn tail_points(samples: &[f64], max: f64) -> Vec<(f64, f64)> {
    let lo = max / 10.0;
    let n = samples.len() as f64;
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut points = Vec::new();
    let mut idx = 0usize;
    while idx < sorted.len() {
        let value = sorted[idx];
        // Advance over ties; survival counts strict exceedances.
        let mut next = idx;
        while next < sorted.len() && sorted[next] == value {
            next += 1;
        }
        let exceed = sorted.len() - next;
        if value >= lo && value < max && exceed >= 5 {
            points.push((value, exceed as f64 / n));
        }
        idx = next;
    }
    points
}

fn fit_rate(samples: &[f64], max: f64) -> Result<f64> {
    let points = tail_points(samples, max);
    if points.len() < 8 {
        return Err(Error::Inconclusive(format!(
            "only {} resolved survival points in the upper decade",
            points.len()
        )));
    }
    let m = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1.ln()).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1.ln()).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    Ok(-slope)
}
