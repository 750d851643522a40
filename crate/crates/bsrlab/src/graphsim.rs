//! Exact finite-n simulation of bounded-size-rule graph processes.
//!
//! Components live in a union-find forest; censuses (class fractions, sparse
//! size histogram, largest component, susceptibility) are maintained
//! incrementally so checkpoint snapshots are O(histogram size).  Continuous
//! time draws a Poisson number of events on the horizon and labels event `k`
//! with time `t_max * k / N_ev` (sorted-uniform labels behind an option);
//! discrete time applies one event per step and labels step `k` with `2k/n`.
//!
//! Each event samples four vertices — either i.i.d. (quadruple mode) or as two
//! distinct-endpoint edges (edge-pair mode) — classifies their components,
//! asks the rule which pair to keep, and unions it.  Self-pairs and
//! already-connected pairs consume the event without changing components.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::hydro::{OdeSolution, RateProfile};
use crate::rules::{Class, EdgeChoice, RuleTable};
use crate::{gridfn, Error, Result};

/// Union-find over vertex indices with union-by-size and path halving.
#[derive(Clone, Debug)]
pub struct DisjointForest {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointForest {
    pub fn new(n: u32) -> DisjointForest {
        DisjointForest {
            parent: (0..n).collect(),
            size: vec![1; n as usize],
        }
    }

    pub fn len(&self) -> u32 {
        self.parent.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Root of `v`'s component, halving paths along the way.
    pub fn find(&mut self, mut v: u32) -> u32 {
        loop {
            let p = self.parent[v as usize];
            if p == v {
                return v;
            }
            let gp = self.parent[p as usize];
            self.parent[v as usize] = gp;
            v = gp;
        }
    }

    /// Size of the component rooted at `root`.
    pub fn size_of_root(&self, root: u32) -> u32 {
        self.size[root as usize]
    }

    /// Merges two distinct roots; returns the surviving root.
    pub fn union_roots(&mut self, a: u32, b: u32) -> u32 {
        debug_assert_ne!(a, b);
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }

    /// Sum of root sizes (must equal n; used by periodic spot checks).
    fn root_size_sum(&self) -> u64 {
        self.parent
            .iter()
            .enumerate()
            .filter(|(v, p)| **p == *v as u32)
            .map(|(v, _)| u64::from(self.size[v]))
            .sum()
    }
}

/// Snapshot of the component structure at one instant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentCensus {
    /// Time label of the snapshot.
    pub time: f64,
    /// Vertex fraction per class: slots `0..K` hold sizes `1..=K`, slot `K`
    /// holds the over-threshold class.
    pub class_fractions: Vec<f64>,
    /// Singleton fraction (same as `class_fractions[0]`).
    pub x_n: f64,
    /// Largest component size.
    pub l1: u32,
    /// Susceptibility: sum of squared component sizes over n.
    pub s2: f64,
    /// Sparse component-size histogram (size -> count), sorted by size.
    pub histogram: Vec<(u32, u64)>,
    /// Size of the component containing the first doubleton, when tracked
    /// (0 before any doubleton exists).
    pub first_doubleton_size: u32,
}

/// Vertex-sampling convention for one event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Four i.i.d. uniform vertices.
    Quadruple,
    /// Two uniform edges with distinct endpoints.
    EdgePair,
}

/// How continuous-mode event times are labeled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeLabeling {
    /// Event `k` of `N` gets time `t_max * k / N` (exchangeability).
    IndexSpacing,
    /// Sorted i.i.d. uniforms on `[0, t_max]`.
    SortedUniform,
}

/// Per-run options shared by the continuous and discrete drivers.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub mode: SamplingMode,
    pub labeling: TimeLabeling,
    /// Record the component of the first size-2 component to appear.
    pub track_first_doubleton: bool,
    /// Record the first time the largest component reaches this size.
    pub l1_threshold: Option<u32>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: SamplingMode::Quadruple,
            labeling: TimeLabeling::IndexSpacing,
            track_first_doubleton: false,
            l1_threshold: None,
        }
    }
}

/// Result of a checkpointed run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub censuses: Vec<ComponentCensus>,
    /// First time label at which the largest component reached the requested
    /// threshold, when one was set.
    pub l1_crossing: Option<f64>,
    /// Events drawn (continuous) or steps applied (discrete).
    pub events: u64,
}

/// What one applied event did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventOutcome {
    /// Kept pair had equal vertices.
    SelfPair,
    /// Kept pair was already connected.
    AlreadyConnected,
    /// Merge of components with the given pre-merge sizes.
    Merged { s1: u32, s2: u32 },
}

/// Live simulation state with incrementally maintained censuses.
pub struct Simulation {
    k: u8,
    n: u32,
    forest: DisjointForest,
    /// Vertices per class (slots `0..K` = sizes `1..=K`, slot `K` = larger).
    class_vertices: Vec<u64>,
    histogram: HashMap<u32, u64>,
    s2_sum: f64,
    l1: u32,
    events: u64,
    first_doubleton_vertex: Option<u32>,
    spot_check_period: u64,
}

impl Simulation {
    pub fn new(k: u8, n: u32) -> Simulation {
        let mut histogram = HashMap::new();
        histogram.insert(1, u64::from(n));
        let mut class_vertices = vec![0; usize::from(k) + 1];
        class_vertices[0] = u64::from(n);
        Simulation {
            k,
            n,
            forest: DisjointForest::new(n),
            class_vertices,
            histogram,
            s2_sum: f64::from(n),
            l1: 1,
            events: 0,
            first_doubleton_vertex: None,
            spot_check_period: 100_000,
        }
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn largest(&self) -> u32 {
        self.l1
    }

    pub fn events_applied(&self) -> u64 {
        self.events
    }

    /// Vertices currently in over-threshold components.
    pub fn over_threshold_vertices(&self) -> u64 {
        self.class_vertices[usize::from(self.k)]
    }

    fn class_slot(&self, size: u32) -> usize {
        if size <= u32::from(self.k) {
            (size - 1) as usize
        } else {
            usize::from(self.k)
        }
    }

    fn histogram_remove(&mut self, size: u32) {
        let slot = self
            .histogram
            .get_mut(&size)
            .expect("histogram entry for live component size");
        *slot -= 1;
        if *slot == 0 {
            self.histogram.remove(&size);
        }
    }

    /// Classifies a vertex's component (path-halving mutates the forest).
    pub fn class_of(&mut self, v: u32) -> Class {
        let root = self.forest.find(v);
        Class::of_size(u64::from(self.forest.size_of_root(root)), self.k)
    }

    /// Number of vertices in the component containing `v`.
    pub fn component_size_of(&mut self, v: u32) -> u32 {
        let root = self.forest.find(v);
        self.forest.size_of_root(root)
    }

    /// Applies one event given its sampled vertices; returns what happened.
    pub fn apply_event(&mut self, rule: &RuleTable, quad: [u32; 4]) -> EventOutcome {
        let classes = [
            self.class_of(quad[0]),
            self.class_of(quad[1]),
            self.class_of(quad[2]),
            self.class_of(quad[3]),
        ];
        let (u, v) = match rule.decide(classes) {
            EdgeChoice::First => (quad[0], quad[1]),
            EdgeChoice::Second => (quad[2], quad[3]),
        };
        let outcome = self.add_edge(u, v);
        self.events += 1;
        if self.events % self.spot_check_period == 0 {
            assert_eq!(
                self.forest.root_size_sum(),
                u64::from(self.n),
                "root sizes no longer sum to n"
            );
        }
        outcome
    }

    /// Unions the endpoints' components, maintaining every census quantity.
    fn add_edge(&mut self, u: u32, v: u32) -> EventOutcome {
        if u == v {
            return EventOutcome::SelfPair;
        }
        let ru = self.forest.find(u);
        let rv = self.forest.find(v);
        if ru == rv {
            return EventOutcome::AlreadyConnected;
        }
        let s1 = self.forest.size_of_root(ru);
        let s2 = self.forest.size_of_root(rv);
        let merged = s1 + s2;

        self.histogram_remove(s1);
        self.histogram_remove(s2);
        *self.histogram.entry(merged).or_insert(0) += 1;

        let (slot1, slot2, slot_merged) = (
            self.class_slot(s1),
            self.class_slot(s2),
            self.class_slot(merged),
        );
        self.class_vertices[slot1] -= u64::from(s1);
        self.class_vertices[slot2] -= u64::from(s2);
        self.class_vertices[slot_merged] += u64::from(merged);

        self.s2_sum += 2.0 * f64::from(s1) * f64::from(s2);
        if merged > self.l1 {
            self.l1 = merged;
        }
        if merged == 2 && self.first_doubleton_vertex.is_none() {
            self.first_doubleton_vertex = Some(u);
        }
        self.forest.union_roots(ru, rv);
        EventOutcome::Merged { s1, s2 }
    }

    /// Snapshot at the given time label.
    pub fn census(&mut self, time: f64) -> ComponentCensus {
        let n = f64::from(self.n);
        let class_fractions: Vec<f64> =
            self.class_vertices.iter().map(|c| *c as f64 / n).collect();
        let mut histogram: Vec<(u32, u64)> =
            self.histogram.iter().map(|(s, c)| (*s, *c)).collect();
        histogram.sort_unstable();
        let first_doubleton_size = match self.first_doubleton_vertex {
            Some(v) => {
                let root = self.forest.find(v);
                self.forest.size_of_root(root)
            }
            None => 0,
        };
        ComponentCensus {
            time,
            x_n: class_fractions[0],
            class_fractions,
            l1: self.l1,
            s2: self.s2_sum / n,
            histogram,
            first_doubleton_size,
        }
    }
}

fn sample_quad<R: Rng + ?Sized>(rng: &mut R, n: u32, mode: SamplingMode) -> [u32; 4] {
    match mode {
        SamplingMode::Quadruple => [
            rng.gen_range(0..n),
            rng.gen_range(0..n),
            rng.gen_range(0..n),
            rng.gen_range(0..n),
        ],
        SamplingMode::EdgePair => {
            let v1 = rng.gen_range(0..n);
            let mut v2 = rng.gen_range(0..n);
            while v2 == v1 {
                v2 = rng.gen_range(0..n);
            }
            let v3 = rng.gen_range(0..n);
            let mut v4 = rng.gen_range(0..n);
            while v4 == v3 {
                v4 = rng.gen_range(0..n);
            }
            [v1, v2, v3, v4]
        }
    }
}

fn continuous_event_times<R: Rng + ?Sized>(
    rng: &mut R,
    n: u32,
    t_max: f64,
    labeling: TimeLabeling,
) -> Result<Vec<f64>> {
    let lambda = f64::from(n) * t_max / 2.0;
    if !(lambda.is_finite() && lambda < 1e9) {
        return Err(Error::Validation(format!(
            "event budget n*t_max/2 = {lambda} is out of range"
        )));
    }
    if lambda == 0.0 {
        return Ok(Vec::new());
    }
    let n_ev = Poisson::new(lambda)
        .map_err(|e| Error::Validation(format!("bad Poisson rate: {e}")))?
        .sample(rng) as u64;
    let mut times = Vec::with_capacity(n_ev as usize);
    match labeling {
        TimeLabeling::IndexSpacing => {
            for k in 1..=n_ev {
                times.push(t_max * k as f64 / n_ev as f64);
            }
        }
        TimeLabeling::SortedUniform => {
            for _ in 0..n_ev {
                times.push(rng.gen_range(0.0..t_max));
            }
            times.sort_unstable_by(f64::total_cmp);
        }
    }
    Ok(times)
}

/// Drives events through a simulation, interleaving checkpoint snapshots and
/// calling `hook` after each applied event (audits ride on this).
fn run_events<R, F>(
    rule: &RuleTable,
    n: u32,
    times: &[f64],
    checkpoints: &[f64],
    rng: &mut R,
    opts: &RunOptions,
    mut hook: F,
) -> Result<RunResult>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Simulation, f64, EventOutcome),
{
    if n < 4 {
        return Err(Error::Validation(format!("need n >= 4 vertices, got {n}")));
    }
    let mut cps: Vec<f64> = checkpoints.to_vec();
    cps.sort_unstable_by(f64::total_cmp);
    let mut sim = Simulation::new(rule.k(), n);
    let mut censuses = Vec::with_capacity(cps.len());
    let mut cp_iter = cps.iter().peekable();
    let mut l1_crossing = None;
    for &t in times {
        while let Some(&&cp) = cp_iter.peek() {
            if cp < t {
                censuses.push(sim.census(cp));
                cp_iter.next();
            } else {
                break;
            }
        }
        let quad = sample_quad(rng, n, opts.mode);
        let outcome = sim.apply_event(rule, quad);
        hook(&mut sim, t, outcome);
        if let Some(thr) = opts.l1_threshold {
            if l1_crossing.is_none() && sim.largest() >= thr {
                l1_crossing = Some(t);
            }
        }
    }
    for &cp in cp_iter {
        censuses.push(sim.census(cp));
    }
    Ok(RunResult {
        censuses,
        l1_crossing,
        events: sim.events_applied(),
    })
}

/// Continuous-time run: Poisson event count on `[0, t_max]`, censuses at the
/// requested checkpoint times.
pub fn run_continuous<R: Rng + ?Sized>(
    rule: &RuleTable,
    n: u32,
    t_max: f64,
    checkpoints: &[f64],
    rng: &mut R,
    opts: &RunOptions,
) -> Result<RunResult> {
    if !(t_max.is_finite() && t_max >= 0.0) {
        return Err(Error::Validation(format!("bad horizon {t_max}")));
    }
    if checkpoints.iter().any(|c| *c < 0.0 || *c > t_max) {
        return Err(Error::Validation(
            "checkpoints must lie within [0, t_max]".into(),
        ));
    }
    let times = continuous_event_times(rng, n, t_max, opts.labeling)?;
    run_events(rule, n, &times, checkpoints, rng, opts, |_, _, _| {})
}

/// Discrete-time run: one event per step, step `k` labeled time `2k/n`,
/// censuses at the requested step indices.
pub fn run_discrete<R: Rng + ?Sized>(
    rule: &RuleTable,
    n: u32,
    steps: u64,
    checkpoint_steps: &[u64],
    rng: &mut R,
    opts: &RunOptions,
) -> Result<RunResult> {
    if checkpoint_steps.iter().any(|s| *s > steps) {
        return Err(Error::Validation(
            "checkpoint steps must not exceed the step count".into(),
        ));
    }
    // A checkpoint labeled 2k/n is emitted only once a strictly later event
    // time arrives, so it lands after event k has applied — exactly the
    // "census at step k includes step k" contract.
    let step_time = |k: u64| 2.0 * k as f64 / f64::from(n);
    let times: Vec<f64> = (1..=steps).map(step_time).collect();
    let checkpoints: Vec<f64> = checkpoint_steps.iter().map(|k| step_time(*k)).collect();
    run_events(rule, n, &times, &checkpoints, rng, opts, |_, _, _| {})
}

/// Sup over checkpoints of the worst class-fraction deviation between one
/// finite-n trajectory and the deterministic solution.
pub fn hydrodynamic_deviation<R: Rng + ?Sized>(
    rule: &RuleTable,
    sol: &OdeSolution,
    n: u32,
    horizon: f64,
    n_checkpoints: usize,
    rng: &mut R,
) -> Result<f64> {
    if horizon > sol.horizon() + 1e-12 {
        return Err(Error::Validation(format!(
            "deviation horizon {horizon} beyond solved horizon {}",
            sol.horizon()
        )));
    }
    let checkpoints: Vec<f64> = (1..=n_checkpoints)
        .map(|j| horizon * j as f64 / n_checkpoints as f64)
        .collect();
    let result = run_continuous(rule, n, horizon, &checkpoints, rng, &RunOptions::default())?;
    let mut sup = 0.0_f64;
    for census in &result.censuses {
        let x = sol.state_at(census.time);
        for (xi_n, xi) in census.class_fractions.iter().zip(&x) {
            sup = sup.max((xi_n - xi).abs());
        }
    }
    Ok(sup)
}

/// One audited event family: observed count vs predicted integral.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditRow {
    /// "a1".."aK" (new over-threshold component of size K+i from two bounded
    /// parents), "c1".."cK" (bounded size-i absorbed by an over-threshold
    /// component), or "b" (kept pair with both endpoints over threshold).
    pub label: String,
    pub observed: u64,
    pub predicted: f64,
    /// observed/predicted (NaN when predicted = 0 and observed > 0).
    pub ratio: f64,
    /// |observed - predicted| / sqrt(predicted); 0 for the 0/0 case.
    pub z: f64,
    /// Fewer than 100 predicted events: the window is too narrow to judge.
    pub insufficient: bool,
    pub pass: bool,
}

/// Empirical-vs-predicted event rates over a time window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub rule_name: String,
    pub n: u32,
    pub window: (f64, f64),
    pub rows: Vec<AuditRow>,
    pub all_pass: bool,
}

/// Counts rate events over `window` in one continuous run and compares with
/// the predicted integrals of the rate functions.
///
/// Creation events (two bounded parents merging past the threshold) are
/// predicted by `n * int a_i`; absorption events by `int c_i(v) V*(v) dv`
/// with `V*` the live over-threshold vertex count; internal pairings by
/// `int b(v) V*(v)(V*(v)-1)/(2n) dv`.  The `V*`-weighted integrals use the
/// empirical `V*` held piecewise constant between events, with the rate
/// factor integrated exactly on the solver grid.
pub fn rate_audit<R: Rng + ?Sized>(
    rule: &RuleTable,
    profile: &RateProfile,
    n: u32,
    window: (f64, f64),
    rng: &mut R,
) -> Result<AuditReport> {
    let (w_lo, w_hi) = window;
    if !(0.0 <= w_lo && w_lo < w_hi) {
        return Err(Error::Validation(format!(
            "bad audit window [{w_lo}, {w_hi}]"
        )));
    }
    if w_hi > profile.horizon() + 1e-12 {
        return Err(Error::Validation(format!(
            "audit window end {w_hi} beyond profile horizon {}",
            profile.horizon()
        )));
    }
    let k = usize::from(rule.k());
    let h = profile.h;
    // Prefix integrals of the rate curves for exact per-interval quadrature.
    let c_prefix: Vec<Vec<f64>> = profile
        .c
        .iter()
        .map(|row| gridfn::prefix_trapezoid(h, row))
        .collect();
    let b_prefix = gridfn::prefix_trapezoid(h, &profile.b);
    let a_prefix: Vec<Vec<f64>> = profile
        .a
        .iter()
        .map(|row| gridfn::prefix_trapezoid(h, row))
        .collect();

    let times = continuous_event_times(rng, n, w_hi, TimeLabeling::IndexSpacing)?;
    let mut a_obs = vec![0u64; k];
    let mut c_obs = vec![0u64; k];
    let mut b_obs = 0u64;
    let mut c_pred = vec![0.0; k];
    let mut b_pred = 0.0;
    let mut prev_t = 0.0_f64;

    {
        let opts = RunOptions::default();
        let threshold = u64::from(rule.k());
        run_events(rule, n, &times, &[], rng, &opts, |sim, t, outcome| {
            // Accumulate V*-weighted predictions over [prev_t, t) ∩ window.
            let lo = prev_t.max(w_lo);
            let hi = t.min(w_hi);
            if hi > lo {
                let v_star = sim_v_star_before(sim, outcome);
                for i in 0..k {
                    c_pred[i] += v_star * gridfn::integral_between(h, &c_prefix[i], lo, hi);
                }
                b_pred += v_star * (v_star - 1.0).max(0.0) / (2.0 * f64::from(n))
                    * gridfn::integral_between(h, &b_prefix, lo, hi);
            }
            prev_t = t;
            if t < w_lo || t > w_hi {
                return;
            }
            match outcome {
                EventOutcome::Merged { s1, s2 } => {
                    let big1 = u64::from(s1) > threshold;
                    let big2 = u64::from(s2) > threshold;
                    if !big1 && !big2 {
                        let sum = u64::from(s1) + u64::from(s2);
                        if sum > threshold {
                            a_obs[(sum - threshold - 1) as usize] += 1;
                        }
                    } else if big1 != big2 {
                        let small = if big1 { s2 } else { s1 };
                        c_obs[(small - 1) as usize] += 1;
                    } else {
                        b_obs += 1;
                    }
                }
                EventOutcome::AlreadyConnected => {
                    // A kept pair inside one over-threshold component is still
                    // an internal pairing event.
                    b_obs += 1;
                }
                EventOutcome::SelfPair => {}
            }
        })?;
    }

    let mut rows = Vec::new();
    for i in 0..k {
        let predicted =
            f64::from(n) * gridfn::integral_between(h, &a_prefix[i], w_lo, w_hi);
        rows.push(audit_row(format!("a{}", i + 1), a_obs[i], predicted));
    }
    for i in 0..k {
        rows.push(audit_row(format!("c{}", i + 1), c_obs[i], c_pred[i]));
    }
    rows.push(audit_row("b".into(), b_obs, b_pred));
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(AuditReport {
        rule_name: rule.name().to_string(),
        n,
        window,
        rows,
        all_pass,
    })
}

fn audit_row(label: String, observed: u64, predicted: f64) -> AuditRow {
    if predicted == 0.0 {
        let pass = observed == 0;
        return AuditRow {
            label,
            observed,
            predicted,
            ratio: if pass { 1.0 } else { f64::NAN },
            z: if pass { 0.0 } else { f64::INFINITY },
            insufficient: false,
            pass,
        };
    }
    let z = (observed as f64 - predicted).abs() / predicted.sqrt();
    let insufficient = predicted < 100.0;
    AuditRow {
        label,
        observed,
        predicted,
        ratio: observed as f64 / predicted,
        z,
        insufficient,
        pass: z <= 3.0,
    }
}

fn sim_v_star_before(sim: &Simulation, outcome: EventOutcome) -> f64 {
    // The hook runs after the event applied; undo its effect on V* to get the
    // value that was in force on the preceding interval.
    let mut v_star = sim.over_threshold_vertices() as f64;
    if let EventOutcome::Merged { s1, s2 } = outcome {
        let k = u32::from(sim.k);
        let merged = s1 + s2;
        if merged > k {
            v_star -= f64::from(merged);
            if s1 > k {
                v_star += f64::from(s1);
            }
            if s2 > k {
                v_star += f64::from(s2);
            }
        }
    }
    v_star.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydro;
    use crate::rules::builtin;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_run_census_is_all_singletons() {
        let bf = builtin("bf").unwrap();
        let result =
            run_continuous(&bf, 100, 0.0, &[0.0], &mut rng(1), &RunOptions::default()).unwrap();
        let census = &result.censuses[0];
        assert_eq!(census.l1, 1);
        assert_eq!(census.x_n, 1.0);
        assert_eq!(census.histogram, vec![(1, 100)]);
        assert!((census.s2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scripted_bf_oracle() {
        // Three scripted quadruples on n = 6 vertices; hand-traced outcome is
        // three doubletons.
        let bf = builtin("bf").unwrap();
        let mut sim = Simulation::new(bf.k(), 6);
        for quad in [[0u32, 1, 2, 3], [0, 1, 2, 3], [4, 5, 0, 1]] {
            sim.apply_event(&bf, quad);
        }
        let census = sim.census(1.0);
        assert_eq!(census.l1, 2);
        assert_eq!(census.histogram, vec![(2, 3)]);
        // First doubleton is {0,1}; after the run it is still size 2.
        assert_eq!(census.first_doubleton_size, 2);
    }

    #[test]
    fn union_adds_sizes() {
        let mut forest = DisjointForest::new(10);
        for pair in [(0, 1), (1, 2)] {
            let (a, b) = (forest.find(pair.0), forest.find(pair.1));
            forest.union_roots(a, b);
        }
        for pair in [(3, 4), (4, 5), (5, 6)] {
            let (a, b) = (forest.find(pair.0), forest.find(pair.1));
            forest.union_roots(a, b);
        }
        let r0 = forest.find(0);
        let r3 = forest.find(3);
        assert_eq!(forest.size_of_root(r0), 3);
        assert_eq!(forest.size_of_root(r3), 4);
        let merged = forest.union_roots(r0, r3);
        assert_eq!(forest.size_of_root(merged), 7);
    }

    #[test]
    fn census_quantities_stay_consistent() {
        let bf = builtin("bf").unwrap();
        let n = 2000;
        let result = run_continuous(
            &bf,
            n,
            1.0,
            &[0.25, 0.5, 0.75, 1.0],
            &mut rng(7),
            &RunOptions::default(),
        )
        .unwrap();
        let mut prev_l1 = 0;
        for census in &result.censuses {
            let mass: u64 = census.histogram.iter().map(|(s, c)| u64::from(*s) * c).sum();
            assert_eq!(mass, u64::from(n));
            let l1_from_hist = census.histogram.iter().map(|(s, _)| *s).max().unwrap();
            assert_eq!(census.l1, l1_from_hist);
            let s2_from_hist: f64 = census
                .histogram
                .iter()
                .map(|(s, c)| f64::from(*s).powi(2) * *c as f64)
                .sum::<f64>()
                / f64::from(n);
            assert!((census.s2 - s2_from_hist).abs() < 1e-9 * s2_from_hist.max(1.0));
            let frac_sum: f64 = census.class_fractions.iter().sum();
            assert!((frac_sum - 1.0).abs() < 1e-12);
            assert!(census.l1 >= prev_l1, "largest component shrank");
            prev_l1 = census.l1;
        }
    }

    #[test]
    fn determinism_census_series_identical() {
        let rule = builtin("k2-twos-first").unwrap();
        let opts = RunOptions::default();
        let mk = || {
            run_continuous(&rule, 5000, 1.2, &[0.3, 0.6, 0.9, 1.2], &mut rng(42), &opts)
                .unwrap()
                .censuses
        };
        let a = mk();
        let b = mk();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn expected_event_count_matches_rate() {
        let bf = builtin("bf").unwrap();
        let n = 200_000;
        let result =
            run_continuous(&bf, n, 1.0, &[], &mut rng(3), &RunOptions::default()).unwrap();
        let lambda = f64::from(n) / 2.0;
        let z = (result.events as f64 - lambda) / lambda.sqrt();
        assert!(z.abs() < 4.0, "event count z-score {z}");
    }

    #[test]
    fn discrete_step_labels_and_count() {
        let bf = builtin("bf").unwrap();
        let result = run_discrete(
            &bf,
            100,
            50,
            &[0, 25, 50],
            &mut rng(5),
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(result.events, 50);
        let labels: Vec<f64> = result.censuses.iter().map(|c| c.time).collect();
        assert_eq!(labels, vec![0.0, 0.5, 1.0]);
        // Steps consumed: census at step 25 reflects exactly 25 events.
        let mass: u64 = result.censuses[1]
            .histogram
            .iter()
            .map(|(s, c)| u64::from(*s) * c)
            .sum();
        assert_eq!(mass, 100);
    }

    #[test]
    fn phase_transition_contrast() {
        // Far below the critical point the largest component is a vanishing
        // fraction; above it, a macroscopic one.
        let bf = builtin("bf").unwrap();
        let n = 30_000;
        let result = run_continuous(
            &bf,
            n,
            1.4,
            &[0.9, 1.4],
            &mut rng(11),
            &RunOptions::default(),
        )
        .unwrap();
        let sub = f64::from(result.censuses[0].l1) / f64::from(n);
        let sup = f64::from(result.censuses[1].l1) / f64::from(n);
        assert!(sub < 0.01, "subcritical fraction {sub}");
        assert!(sup > 0.05, "supercritical fraction {sup}");
    }

    #[test]
    fn l1_threshold_crossing_recorded() {
        let bf = builtin("bf").unwrap();
        let opts = RunOptions {
            l1_threshold: Some(50),
            ..RunOptions::default()
        };
        let result = run_continuous(&bf, 20_000, 1.4, &[], &mut rng(13), &opts).unwrap();
        let crossing = result.l1_crossing.expect("threshold reached");
        assert!(crossing > 0.5 && crossing < 1.4, "crossing at {crossing}");
    }

    #[test]
    fn hydrodynamic_deviation_is_small_at_moderate_n() {
        let bf = builtin("bf").unwrap();
        let sol = hydro::solve_master_ode(&bf, 1.0, 4000).unwrap();
        let dev = hydrodynamic_deviation(&bf, &sol, 50_000, 1.0, 50, &mut rng(17)).unwrap();
        assert!(dev < 0.02, "deviation {dev}");
        assert!(dev > 0.0);
    }

    #[test]
    fn rate_audit_small_bf() {
        let bf = builtin("bf").unwrap();
        let sol = hydro::solve_master_ode(&bf, 0.6, 4000).unwrap();
        let profile = hydro::rate_functions(&bf, &sol).unwrap();
        let report = rate_audit(&bf, &profile, 200_000, (0.1, 0.6), &mut rng(19)).unwrap();
        assert!(
            report.all_pass,
            "audit rows: {:?}",
            report
                .rows
                .iter()
                .map(|r| format!("{}: {} vs {:.1} (z={:.2})", r.label, r.observed, r.predicted, r.z))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn sorted_uniform_labeling_also_runs() {
        let bf = builtin("bf").unwrap();
        let opts = RunOptions {
            labeling: TimeLabeling::SortedUniform,
            ..RunOptions::default()
        };
        let result = run_continuous(&bf, 5000, 0.8, &[0.4, 0.8], &mut rng(23), &opts).unwrap();
        assert_eq!(result.censuses.len(), 2);
        assert!(result.censuses[1].l1 >= result.censuses[0].l1);
    }

    #[test]
    fn validation_errors() {
        let bf = builtin("bf").unwrap();
        assert!(run_continuous(&bf, 3, 1.0, &[], &mut rng(1), &RunOptions::default()).is_err());
        assert!(
            run_continuous(&bf, 100, 1.0, &[2.0], &mut rng(1), &RunOptions::default()).is_err()
        );
        assert!(
            run_discrete(&bf, 100, 10, &[11], &mut rng(1), &RunOptions::default()).is_err()
        );
    }
}
