//! Acceptance gate: thirteen numbered end-to-end checks with pinned
//! tolerances.  Each test prints one `criterion NN (<label>): PASS` line
//! (visible under `--nocapture`); the default harness output already shows
//! one ok/FAILED line per criterion through the test names.
//!
//! Every random quantity is driven by the fixed master seed below, so each
//! check is a deterministic regression: measured values quoted in the
//! assertions were observed on the pinned-seed pilot and bounded with margin.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use bsrlab::branching::{BranchingSampler, ProgenySample};
use bsrlab::graphsim::{self, RunOptions, Simulation};
use bsrlab::harness::{bootstrap_quantile_se, quantile, scaling_experiment, trial_rng};
use bsrlab::harness::{coupling_experiment, ExperimentKind};
use bsrlab::hydro::{self, taylor_orders, OdeSolution, RateProfile};
use bsrlab::rgiva::{self, ClusterTrajectory};
use bsrlab::rules::{builtin, RuleTable};
use bsrlab::spectral::{self, CriticalOptions, CriticalReport, MomentField};

const MASTER_SEED: u64 = 0x2026_0814;

/// Frozen regression bound for the largest single-trial scaling ratio; the
/// pinned-seed pilot observed 0.772 (n=1e6, second-largest gap).
const SCALING_MAX_R_BOUND: f64 = 1.2;

fn rule(name: &str) -> RuleTable {
    builtin(name).unwrap_or_else(|| panic!("missing builtin rule {name}"))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn bf_critical() -> &'static (CriticalReport, OdeSolution, RateProfile) {
    static CELL: OnceLock<(CriticalReport, OdeSolution, RateProfile)> = OnceLock::new();
    CELL.get_or_init(|| {
        spectral::critical_time(&rule("bf"), &CriticalOptions::default())
            .expect("bf critical time")
    })
}

fn er_critical() -> &'static (CriticalReport, OdeSolution, RateProfile) {
    static CELL: OnceLock<(CriticalReport, OdeSolution, RateProfile)> = OnceLock::new();
    CELL.get_or_init(|| {
        spectral::critical_time(&rule("erdos-renyi"), &CriticalOptions::default())
            .expect("erdos-renyi critical time")
    })
}

/// Coarse-grid profile for sampling-heavy branching checks (per-node cost is
/// linear in the grid length; h = horizon/steps stays well below any
/// tolerance in play).
fn coarse_profile(name: &str, horizon: f64, steps: usize) -> RateProfile {
    let r = rule(name);
    let sol = hydro::solve_master_ode(&r, horizon, steps).unwrap();
    hydro::rate_functions(&r, &sol).unwrap()
}

fn progeny_samples(
    profile: &RateProfile,
    t: f64,
    count: usize,
    stream: u64,
) -> (Vec<ProgenySample>, f64) {
    let mut sampler = BranchingSampler::new(profile, t).unwrap();
    let cap = bsrlab::branching::default_progeny_cap(profile.k);
    let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Branching, stream);
    let samples: Vec<ProgenySample> = (0..count)
        .map(|_| sampler.total_progeny(cap, &mut rng).unwrap())
        .collect();
    let diag = sampler.diagnostics();
    (samples, diag.cap_hit_rate())
}

#[test]
fn criterion_01_ode_conservation_and_rk4_order() {
    let names = [
        "bf",
        "k2-erdos-renyi",
        "k2-twos-first",
        "k2-twos-second",
        "bohman-frieze-k3",
    ];
    for name in names {
        let r = rule(name);
        let sol = hydro::solve_master_ode(&r, 2.0, hydro::DEFAULT_STEPS).unwrap();
        for state in &sol.states {
            let mass: f64 = state.iter().sum();
            assert!(
                (mass - 1.0).abs() <= 1e-8,
                "{name}: mass error {}",
                (mass - 1.0).abs()
            );
            for x in state {
                assert!(*x >= -1e-12, "{name}: negative fraction {x}");
            }
        }
        // Order of accuracy by step-halving against a fine reference.
        let reference = hydro::solve_master_ode(&r, 2.0, 1600).unwrap();
        let err = |steps: usize| -> f64 {
            let s = hydro::solve_master_ode(&r, 2.0, steps).unwrap();
            s.states
                .last()
                .unwrap()
                .iter()
                .zip(reference.states.last().unwrap())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(100) / err(200);
        assert!(
            (12.0..=20.0).contains(&ratio),
            "{name}: step-halving error ratio {ratio}"
        );
        println!("criterion 01 ({name}): conservation <= 1e-8, halving ratio {ratio:.2}");
    }
    println!("criterion 01 (ode conservation and rk4 order): PASS");
}

#[test]
fn criterion_02_k1_rate_reduction_identities() {
    let (_, sol, profile) = bf_critical();
    assert_eq!(profile.delta, 0.0);
    let mut worst = 0.0_f64;
    for slot in 0..profile.len() {
        let y = sol.states[slot][0];
        let a_ref = y * y - y.powi(4) / 2.0;
        let c_ref = (1.0 - y * y) * y;
        let b_ref = 1.0 - y * y;
        worst = worst
            .max((profile.a[0][slot] - a_ref).abs())
            .max((profile.c[0][slot] - c_ref).abs())
            .max((profile.b[slot] - b_ref).abs());
    }
    assert!(worst <= 1e-10, "worst pointwise reduction error {worst}");
    println!("criterion 02 (closed-form rate reduction at K=1): PASS (worst {worst:.2e})");
}

#[test]
fn criterion_03_event_rate_audit_at_n_1e6() {
    let window = (0.2, 0.8);
    let n = 1_000_000;
    let (_, _, bf_profile) = bf_critical();
    let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Audit, 1);
    let report = graphsim::rate_audit(&rule("bf"), bf_profile, n, window, &mut rng).unwrap();
    for row in &report.rows {
        println!(
            "criterion 03 bf {}: observed {} predicted {:.1} z {:.2}",
            row.label, row.observed, row.predicted, row.z
        );
    }
    assert!(report.all_pass, "bf audit rows: {:?}", report.rows);

    let k2 = rule("k2-twos-first");
    let k2_profile = coarse_profile("k2-twos-first", 0.8, 8000);
    let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Audit, 2);
    let report = graphsim::rate_audit(&k2, &k2_profile, n, window, &mut rng).unwrap();
    for row in &report.rows {
        println!(
            "criterion 03 k2 {}: observed {} predicted {:.1} z {:.2}",
            row.label, row.observed, row.predicted, row.z
        );
    }
    assert!(report.all_pass, "k2 audit rows: {:?}", report.rows);
    println!("criterion 03 (event rates vs integrated predictions, n=1e6): PASS");
}

#[test]
fn criterion_04_critical_time_cross_validation() {
    let (bf_report, _, _) = bf_critical();
    assert!(bf_report.t_c > 1.0, "bf t_c = {}", bf_report.t_c);
    let (er_report, _, _) = er_critical();
    assert!(
        (er_report.t_c - 1.0).abs() <= 1e-3,
        "empty-rule t_c = {}",
        er_report.t_c
    );

    let n: u32 = 1_000_000;
    let threshold = (f64::from(n as u32)).powf(2.0 / 3.0).ceil() as u32;
    let t_max = bf_report.t_c + 0.25;
    let opts = RunOptions {
        l1_threshold: Some(threshold),
        ..RunOptions::default()
    };
    let bf = rule("bf");
    let mut crossings = Vec::new();
    for trial in 0..3 {
        let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Simulate, 100 + trial);
        let run = graphsim::run_continuous(&bf, n, t_max, &[t_max], &mut rng, &opts).unwrap();
        crossings.push(run.l1_crossing.expect("threshold crossing before horizon"));
    }
    let t_hat = median(crossings.clone());
    let rel = (bf_report.t_c - t_hat).abs() / bf_report.t_c;
    assert!(
        rel <= 0.02,
        "spectral {} vs simulated {} (rel {rel})",
        bf_report.t_c,
        t_hat
    );
    println!(
        "criterion 04 (critical time): PASS (spectral {:.6}, simulated {:.4}, rel {:.3}%, empty-rule {:.6})",
        bf_report.t_c,
        t_hat,
        rel * 100.0,
        er_report.t_c
    );
}

#[test]
fn criterion_05_gap_linearity_near_t_c() {
    let (report, _, profile) = bf_critical();
    let field = MomentField::new(profile).unwrap();
    let mut slopes = Vec::new();
    for j in 0..7 {
        let d = 0.002 + 0.018 * j as f64 / 6.0;
        let u = report.t_c - d;
        let rho = spectral::operator_norm(&field, u, spectral::DEFAULT_NYSTROM_N)
            .unwrap()
            .rho;
        slopes.push((1.0 - rho) / d);
    }
    let min = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = slopes.iter().cloned().fold(0.0, f64::max);
    let variation = (max - min) / min;
    assert!(variation < 0.05, "slopes {slopes:?} vary by {variation}");
    println!(
        "criterion 05 (gap linearity): PASS (slope {:.4}..{:.4}, variation {:.2}%)",
        min,
        max,
        variation * 100.0
    );
}

#[test]
fn criterion_06_perturbation_response_exponents() {
    let deltas = [1e-2, 1e-3, 1e-4];
    let (_, _, bf_profile) = bf_critical();
    let scan =
        spectral::perturbation_scan(bf_profile, 1.0, &deltas, spectral::DEFAULT_NYSTROM_N)
            .unwrap();
    assert!(!scan.inconclusive, "bf scan shows no resolvable response");
    assert!(scan.slope >= 0.9, "bf log-log slope {}", scan.slope);
    let bf_slope = scan.slope;

    let k2_profile = coarse_profile("k2-twos-first", 1.0, hydro::DEFAULT_STEPS);
    let orders = taylor_orders(&rule("k2-twos-first"), 12).unwrap();
    let scan =
        spectral::perturbation_scan(&k2_profile, 1.0, &deltas, spectral::DEFAULT_NYSTROM_N)
            .unwrap();
    assert!(!scan.inconclusive, "k2 scan shows no resolvable response");
    assert!(
        scan.slope >= 0.9 * orders.alpha,
        "k2 slope {} vs 0.9 alpha = {}",
        scan.slope,
        0.9 * orders.alpha
    );
    println!(
        "criterion 06 (perturbation exponents): PASS (bf slope {:.3}, k2 slope {:.3} >= {:.3})",
        bf_slope,
        scan.slope,
        0.9 * orders.alpha
    );
}

#[test]
fn criterion_07_taylor_orders() {
    for name in ["k2-erdos-renyi", "k2-twos-first", "k2-twos-second"] {
        let orders = taylor_orders(&rule(name), 12).unwrap();
        assert!(
            orders.zeta >= 1.0 / 3.0 - 1e-12,
            "{name}: zeta {}",
            orders.zeta
        );
        println!(
            "criterion 07 {name}: m_a {:?} m_c {:?} alpha {} zeta {}",
            orders.m_a, orders.m_c, orders.alpha, orders.zeta
        );
    }
    let k3 = taylor_orders(&rule("bohman-frieze-k3"), 12).unwrap();
    assert!(k3.m_a[2] >= 4, "K=3 top merge order {}", k3.m_a[2]);
    let bf = taylor_orders(&rule("bf"), 12).unwrap();
    assert_eq!(bf.m_a[0], 0);
    assert_eq!(bf.m_c[0], 1);
    println!("criterion 07 (vanishing orders and exponents): PASS");
}

#[test]
fn criterion_08_hydrodynamic_deviation_shrinks() {
    let (_, sol, _) = bf_critical();
    let bf = rule("bf");
    let horizon = 1.0;
    let mut medians = Vec::new();
    let mut n5_below = 0;
    for (idx, n) in [10_000_u32, 100_000, 1_000_000].iter().enumerate() {
        let mut devs = Vec::new();
        for seed in 0..10 {
            let mut rng = trial_rng(
                MASTER_SEED,
                ExperimentKind::Simulate,
                1000 + (idx as u64) * 16 + seed,
            );
            let dev =
                graphsim::hydrodynamic_deviation(&bf, sol, *n, horizon, 20, &mut rng).unwrap();
            if *n == 100_000 && dev < f64::from(*n).powf(-0.4) {
                n5_below += 1;
            }
            devs.push(dev);
        }
        medians.push(median(devs));
    }
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "medians {medians:?}"
    );
    assert!(n5_below >= 9, "only {n5_below}/10 seeds below n^-0.4 at n=1e5");
    println!(
        "criterion 08 (deviation medians): PASS ({:.4} > {:.4} > {:.4}; {n5_below}/10 below threshold)",
        medians[0], medians[1], medians[2]
    );
}

#[test]
fn criterion_09_subcritical_scaling_band() {
    let (report, _, _) = bf_critical();
    let t_c = report.t_c;
    let bf = rule("bf");
    let mut cells = Vec::new();
    for n in [100_000_u64, 1_000_000] {
        let d_min = (n as f64).powf(-1.0 / 3.0);
        let d_max = 0.075_f64;
        let ts: Vec<f64> = (0..5)
            .map(|j| {
                let frac = j as f64 / 4.0;
                let d = (d_max.ln() + frac * (d_min.ln() - d_max.ln())).exp();
                t_c - d
            })
            .collect();
        cells.push((n, ts));
    }
    let table = scaling_experiment(&bf, t_c, &cells, 50, 1.0, MASTER_SEED).unwrap();
    for row in &table.rows {
        println!(
            "criterion 09 n={} t={:.4}: median L1 {} median R {:.3} max R {:.3}",
            row.n, row.t, row.median_l1, row.median_ratio, row.max_ratio
        );
    }
    let spread = table.band.1 / table.band.0;
    assert!(
        spread <= 10.0,
        "band {:?} has max/min {spread}",
        table.band
    );
    assert!(
        table.max_ratio_overall <= SCALING_MAX_R_BOUND,
        "max trial ratio {} above frozen bound {SCALING_MAX_R_BOUND}",
        table.max_ratio_overall
    );
    println!(
        "criterion 09 (scaling band): PASS (band {:.3}..{:.3}, spread {:.2}, max trial R {:.2})",
        table.band.0, table.band.1, spread, table.max_ratio_overall
    );
}

#[test]
fn criterion_10_dominance_chain_quantiles() {
    let (report, _, profile) = bf_critical();
    let t = report.t_c - 0.2;
    let n: u32 = 10_000;
    let trials = 2000;
    let bf = rule("bf");

    // Finite graph: component of a fixed vertex at time t.
    let mut graph = Vec::with_capacity(trials);
    let events_dist = Poisson::new(f64::from(n) * t / 2.0).unwrap();
    for trial in 0..trials {
        let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Simulate, 4000 + trial as u64);
        let events = events_dist.sample(&mut rng) as u64;
        let mut sim = Simulation::new(1, n);
        for _ in 0..events {
            let quad = [
                rng.gen_range(0..n),
                rng.gen_range(0..n),
                rng.gen_range(0..n),
                rng.gen_range(0..n),
            ];
            sim.apply_event(&bf, quad);
        }
        graph.push(f64::from(sim.component_size_of(0)));
    }

    // Cluster-representation root component, rates inflated by n^-gamma.
    let gamma = 0.35;
    let delta = f64::from(n).powf(-gamma);
    let inflated = hydro::inflate_rates(profile, delta).unwrap();
    let mut rg = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Rgiva, trial as u64);
        let sample = rgiva::conditioned_root_component(&inflated, f64::from(n), t, &mut rng)
            .unwrap();
        rg.push(sample.volume);
    }

    // Branching envelope driven by the same inflated rates.
    let (samples, _) = progeny_samples(&inflated, t, trials, 7000);
    let mut branch: Vec<f64> = samples.iter().map(|s| s.total_volume).collect();
    assert!(samples.iter().all(|s| !s.truncated));

    graph.sort_unstable_by(f64::total_cmp);
    rg.sort_unstable_by(f64::total_cmp);
    branch.sort_unstable_by(f64::total_cmp);
    let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Rgiva, u64::MAX);
    for alpha in [0.9, 0.99] {
        let (qg, qr, qb) = (
            quantile(&graph, alpha),
            quantile(&rg, alpha),
            quantile(&branch, alpha),
        );
        let m_gr = 2.0
            * (bootstrap_quantile_se(&graph, alpha, 200, &mut rng).powi(2)
                + bootstrap_quantile_se(&rg, alpha, 200, &mut rng).powi(2))
            .sqrt();
        let m_rb = 2.0
            * (bootstrap_quantile_se(&rg, alpha, 200, &mut rng).powi(2)
                + bootstrap_quantile_se(&branch, alpha, 200, &mut rng).powi(2))
            .sqrt();
        assert!(
            qg <= qr + m_gr,
            "alpha {alpha}: graph {qg} above cluster representation {qr} (+{m_gr})"
        );
        assert!(
            qr <= qb + m_rb,
            "alpha {alpha}: cluster representation {qr} above branching {qb} (+{m_rb})"
        );
        println!(
            "criterion 10 alpha {alpha}: graph {qg} <= cluster {qr} <= branching {qb}"
        );
    }
    println!("criterion 10 (dominance chain quantiles): PASS");
}

#[test]
fn criterion_11_tail_rate_scales_with_gap_squared() {
    let (report, _, _) = bf_critical();
    // Coarse dedicated profile: per-sample cost is linear in grid length.
    let profile = coarse_profile("bf", report.t_c - 0.1, 3000);
    let field = MomentField::new(&profile).unwrap();
    let samples = 10_000;
    let mut rates = Vec::new();
    let mut gaps = Vec::new();
    for (idx, d) in [0.3, 0.15].iter().enumerate() {
        let t = report.t_c - d;
        let rho = spectral::operator_norm(&field, t, spectral::DEFAULT_NYSTROM_N)
            .unwrap()
            .rho;
        gaps.push(1.0 - rho);
        let (progeny, cap_rate) = progeny_samples(&profile, t, samples, 7100 + idx as u64);
        assert!(cap_rate < 0.01, "envelope cap hit rate {cap_rate}");
        let volumes: Vec<f64> = progeny.iter().map(|s| s.total_volume).collect();
        let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Branching, 7200 + idx as u64);
        let fit = bsrlab::branching::tail_rate(&volumes, &mut rng).unwrap();
        assert!(!fit.degenerate && fit.rate > 0.0, "tail fit {fit:?}");
        rates.push(fit.rate);
    }
    let measured = rates[0] / rates[1];
    let predicted = (gaps[0] / gaps[1]).powi(2);
    let rel = (measured - predicted).abs() / predicted;
    assert!(
        rel <= 0.25,
        "rate ratio {measured} vs gap-squared ratio {predicted} (rel {rel})"
    );
    println!(
        "criterion 11 (tail rate vs gap^2): PASS (ratio {:.3} vs {:.3}, rel {:.1}%)",
        measured,
        predicted,
        rel * 100.0
    );
}

#[test]
fn criterion_12_branching_mean_structure() {
    // Part one: sampled offspring counts match the computed intensity.
    let profile = coarse_profile("bf", 1.0, 4000);
    let mut sampler = BranchingSampler::new(&profile, 1.0).unwrap();
    let probes = [
        ClusterTrajectory { birth: 0.0, type_idx: 0, seed: 2, jumps: vec![] },
        ClusterTrajectory { birth: 0.2, type_idx: 0, seed: 2, jumps: vec![(0.5, 3)] },
        ClusterTrajectory { birth: 0.5, type_idx: 0, seed: 2, jumps: vec![] },
        ClusterTrajectory {
            birth: 0.05,
            type_idx: 0,
            seed: 2,
            jumps: vec![(0.3, 2), (0.6, 5)],
        },
        ClusterTrajectory { birth: 0.9, type_idx: 0, seed: 2, jumps: vec![] },
    ];
    let trials = 4000;
    for (idx, probe) in probes.iter().enumerate() {
        let law = sampler.offspring_law(probe);
        let mut rng = trial_rng(MASTER_SEED, ExperimentKind::Branching, 7300 + idx as u64);
        let counts: Vec<f64> = (0..trials)
            .map(|_| sampler.sample_children(probe, &mut rng).unwrap().len() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / trials as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / trials as f64;
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - law.total).abs() <= 3.0 * se.max(1e-6),
            "probe {idx}: mean {mean} vs intensity {} (se {se})",
            law.total
        );
        println!(
            "criterion 12 probe {idx}: mean {mean:.4} vs intensity {:.4} (se {se:.4})",
            law.total
        );
    }

    // Part two: generation-volume decay reproduces the operator norm.
    let t = 1.06;
    let profile = coarse_profile("bf", t, 4000);
    let field = MomentField::new(&profile).unwrap();
    let rho = spectral::operator_norm(&field, t, spectral::DEFAULT_NYSTROM_N)
        .unwrap()
        .rho;
    let (samples, _) = progeny_samples(&profile, t, 30_000, 7400);
    let max_gen = samples
        .iter()
        .map(|s| s.generation_volumes.len())
        .max()
        .unwrap();
    let mut totals = vec![0.0_f64; max_gen];
    for s in &samples {
        for (g, v) in s.generation_volumes.iter().enumerate() {
            totals[g] += v;
        }
    }
    let (lo, hi) = (4, 8.min(max_gen - 1));
    let num: f64 = (lo..hi).map(|g| totals[g + 1]).sum();
    let den: f64 = (lo..hi).map(|g| totals[g]).sum();
    let decay = num / den;
    let rel = (decay - rho).abs() / rho;
    assert!(
        rel <= 0.03,
        "generation decay {decay} vs operator norm {rho} (rel {rel})"
    );
    println!(
        "criterion 12 (branching mean structure): PASS (decay {:.4} vs rho {:.4}, rel {:.2}%)",
        decay,
        rho,
        rel * 100.0
    );
}

#[test]
fn criterion_13_discrete_continuous_coupling() {
    let (report, _, _) = bf_critical();
    let t = report.t_c - 0.1;
    let coupling = coupling_experiment(&rule("bf"), 100_000, t, 200, MASTER_SEED).unwrap();
    for row in &coupling.rows {
        println!(
            "criterion 13 alpha {}: discrete {} continuous {} (margin {:.2})",
            row.alpha, row.q_discrete, row.q_continuous, row.margin
        );
    }
    assert!(
        coupling.event_concentration >= 0.95,
        "event concentration {}",
        coupling.event_concentration
    );
    assert!(coupling.all_dominated, "rows {:?}", coupling.rows);
    println!(
        "criterion 13 (discrete vs continuous coupling): PASS (concentration {:.3})",
        coupling.event_concentration
    );
}
