//! Experiment orchestration: seed streams, result persistence, caching, and
//! the composite experiments (scaling sweep, discrete/continuous coupling).
//!
//! Every experiment derives per-trial generators from one master seed via
//! ChaCha streams keyed by (experiment kind, trial index), so trials can run
//! in parallel and any result regenerates byte-identically from its spec.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branching::{self, BranchingSampler};
use crate::graphsim::{self, RunOptions, TimeLabeling};
use crate::hydro::{self, OdeSolution, RateProfile};
use crate::rgiva;
use crate::rules::{load_rule, RuleTable};
use crate::spectral::{self, CriticalOptions};
use crate::{Error, Result};

/// Experiment families the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SolveOde,
    Tc,
    SpectralProfile,
    Perturbation,
    Simulate,
    Rgiva,
    Branching,
    Scaling,
    Coupling,
    Audit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SolveOde => "solve-ode",
            ExperimentKind::Tc => "tc",
            ExperimentKind::SpectralProfile => "spectral-profile",
            ExperimentKind::Perturbation => "perturbation",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Rgiva => "rgiva",
            ExperimentKind::Branching => "branching",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::Audit => "audit",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            ExperimentKind::SolveOde => 1,
            ExperimentKind::Tc => 2,
            ExperimentKind::SpectralProfile => 3,
            ExperimentKind::Perturbation => 4,
            ExperimentKind::Simulate => 5,
            ExperimentKind::Rgiva => 6,
            ExperimentKind::Branching => 7,
            ExperimentKind::Scaling => 8,
            ExperimentKind::Coupling => 9,
            ExperimentKind::Audit => 10,
        }
    }
}

/// Deterministic per-trial generator: master seed keys the cipher, the
/// (kind, trial) pair selects the stream.
pub fn trial_rng(master: u64, kind: ExperimentKind, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((kind.stream_tag() << 48) ^ trial);
    rng
}

/// Fully parameterized experiment request.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Builtin rule name or path to a rule file.
    pub rule: String,
    /// Vertex counts / scale parameters (kind-specific arity).
    #[serde(default)]
    pub n: Vec<u64>,
    /// Times: horizons, checkpoints, windows (kind-specific).
    #[serde(default)]
    pub t: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
    /// ODE steps (solver kinds) or Nystrom nodes are derived from this.
    #[serde(default)]
    pub grid: Option<usize>,
    /// Inflation values (kind-specific arity).
    #[serde(default)]
    pub delta: Vec<f64>,
    /// Inflation exponent: delta = n^{-gamma} when set.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Output stem: CSV to `<out>`, JSON sidecar to `<out>.json`.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_trials() -> u32 {
    1
}

/// What a finished experiment leaves behind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub spec: ExperimentSpec,
    /// Deterministic metric payload (re-running the same experiment spec and
    /// seed reproduces it byte-identically).
    pub payload: serde_json::Value,
    pub version: String,
    /// Wall time, outside the reproducibility contract.
    pub wall_time_s: f64,
}

/// Cache of ODE solutions and rate profiles keyed by rule fingerprint and
/// solver parameters.
#[derive(Default)]
pub struct ProfileCache {
    map: HashMap<(u64, usize, u64, u64), Arc<(OdeSolution, RateProfile)>>,
}

impl ProfileCache {
    pub fn new() -> ProfileCache {
        ProfileCache::default()
    }

    /// Solves (or reuses) the master ODE and rate profile for a rule at the
    /// given horizon/steps, inflating by `delta` when nonzero.
    pub fn get(
        &mut self,
        rule: &RuleTable,
        horizon: f64,
        steps: usize,
        delta: f64,
    ) -> Result<Arc<(OdeSolution, RateProfile)>> {
        let key = (
            rule.fingerprint(),
            steps,
            horizon.to_bits(),
            delta.to_bits(),
        );
        if let Some(hit) = self.map.get(&key) {
            return Ok(hit.clone());
        }
        let sol = hydro::solve_master_ode(rule, horizon, steps)?;
        let mut profile = hydro::rate_functions(rule, &sol)?;
        if delta > 0.0 {
            profile = hydro::inflate_rates(&profile, delta)?;
        }
        let entry = Arc::new((sol, profile));
        self.map.insert(key, entry.clone());
        Ok(entry)
    }
}

fn csv_write(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{header}")?;
    for row in rows {
        writeln!(file, "{row}")?;
    }
    Ok(())
}

fn census_csv_rows(k: u8, censuses: &[graphsim::ComponentCensus], trial: Option<u32>) -> Vec<String> {
    let mut rows = Vec::with_capacity(censuses.len());
    for c in censuses {
        let mut cols = Vec::with_capacity(usize::from(k) + 5);
        if let Some(tr) = trial {
            cols.push(tr.to_string());
        }
        cols.push(format!("{}", c.time));
        for frac in &c.class_fractions {
            cols.push(format!("{frac}"));
        }
        cols.push(c.l1.to_string());
        cols.push(format!("{}", c.s2));
        rows.push(cols.join(","));
    }
    rows
}

fn census_csv_header(k: u8, with_trial: bool) -> String {
    let mut cols = Vec::new();
    if with_trial {
        cols.push("trial".to_string());
    }
    cols.push("time".to_string());
    for i in 1..=k {
        cols.push(format!("x{i}"));
    }
    cols.push("x_omega".to_string());
    cols.push("L1".to_string());
    cols.push("S2".to_string());
    cols.join(",")
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg.to_string()))
    }
}

fn one_n(spec: &ExperimentSpec) -> Result<u64> {
    require(spec.n.len() == 1, "this experiment takes exactly one --n")?;
    Ok(spec.n[0])
}

fn effective_delta(spec: &ExperimentSpec, n: u64) -> Result<f64> {
    if let Some(gamma) = spec.gamma {
        let config = hydro::PerturbationConfig::new(gamma)?;
        require(n > 0, "--gamma needs an --n to convert into a delta")?;
        return Ok(config.delta_n(n));
    }
    match spec.delta.len() {
        0 => Ok(0.0),
        1 => Ok(spec.delta[0]),
        _ => Err(Error::Validation(
            "this experiment takes at most one --delta".into(),
        )),
    }
}

/// Runs one experiment end to end: validates, dispatches, writes outputs.
pub fn run(spec: &ExperimentSpec) -> Result<ResultRecord> {
    let started = Instant::now();
    let parsed = load_rule(&spec.rule)?;
    let rule = parsed.table;
    let mut cache = ProfileCache::new();
    let payload = match spec.kind {
        ExperimentKind::SolveOde => run_solve_ode(spec, &rule)?,
        ExperimentKind::Tc => run_tc(spec, &rule)?,
        ExperimentKind::SpectralProfile => run_spectral_profile(spec, &rule, &mut cache)?,
        ExperimentKind::Perturbation => run_perturbation(spec, &rule, &mut cache)?,
        ExperimentKind::Simulate => run_simulate(spec, &rule)?,
        ExperimentKind::Rgiva => run_rgiva(spec, &rule, &mut cache)?,
        ExperimentKind::Branching => run_branching(spec, &rule, &mut cache)?,
        ExperimentKind::Scaling => run_scaling(spec, &rule)?,
        ExperimentKind::Coupling => run_coupling(spec, &rule)?,
        ExperimentKind::Audit => run_audit(spec, &rule, &mut cache)?,
    };
    let record = ResultRecord {
        experiment: spec.kind.name().to_string(),
        spec: spec.clone(),
        payload,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(out) = &spec.out {
        let sidecar = sidecar_path(out);
        let file = std::fs::File::create(&sidecar)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &record)?;
    }
    Ok(record)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn run_solve_ode(spec: &ExperimentSpec, rule: &RuleTable) -> Result<serde_json::Value> {
    require(spec.t.len() == 1, "solve-ode takes exactly one --t (horizon)")?;
    let steps = spec.grid.unwrap_or(hydro::DEFAULT_STEPS);
    let sol = hydro::solve_master_ode(rule, spec.t[0], steps)?;
    sol.validate()?;
    if let Some(out) = &spec.out {
        // Subsample to at most ~2000 rows.
        let stride = (sol.len() / 2000).max(1);
        let mut rows = Vec::new();
        for (idx, state) in sol.states.iter().enumerate() {
            if idx % stride != 0 && idx != sol.len() - 1 {
                continue;
            }
            let mut cols = vec![format!("{}", idx as f64 * sol.h)];
            cols.extend(state.iter().map(|x| format!("{x}")));
            rows.push(cols.join(","));
        }
        let mut header = vec!["time".to_string()];
        for i in 1..=rule.k() {
            header.push(format!("x{i}"));
        }
        header.push("x_omega".to_string());
        csv_write(out, &header.join(","), &rows)?;
    }
    let final_state = sol.states.last().unwrap().clone();
    Ok(serde_json::json!({
        "rule": rule.name(),
        "k": rule.k(),
        "horizon": sol.horizon(),
        "steps": steps,
        "final_state": final_state,
        "mass_error": (final_state.iter().sum::<f64>() - 1.0).abs(),
    }))
}

fn run_tc(spec: &ExperimentSpec, rule: &RuleTable) -> Result<serde_json::Value> {
    let opts = CriticalOptions {
        steps: spec.grid.unwrap_or(hydro::DEFAULT_STEPS),
        delta: effective_delta(spec, spec.n.first().copied().unwrap_or(0))?,
        ..CriticalOptions::default()
    };
    let (report, _, _) = spectral::critical_time(rule, &opts)?;
    if let Some(out) = &spec.out {
        let file = std::fs::File::create(out)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    }
    Ok(serde_json::to_value(&report)?)
}

fn run_spectral_profile(
    spec: &ExperimentSpec,
    rule: &RuleTable,
    cache: &mut ProfileCache,
) -> Result<serde_json::Value> {
    require(!spec.t.is_empty(), "spectral-profile needs at least one --t")?;
    let horizon = spec.t.iter().cloned().fold(0.0, f64::max);
    let delta = effective_delta(spec, spec.n.first().copied().unwrap_or(0))?;
    let entry = cache.get(rule, horizon, hydro::DEFAULT_STEPS, delta)?;
    let field = spectral::MomentField::new(&entry.1)?;
    let n = spec.grid.unwrap_or(spectral::DEFAULT_NYSTROM_N);
    let mut times = spec.t.clone();
    times.sort_unstable_by(f64::total_cmp);
    let profile = spectral::spectral_profile(&field, &times, n)?;
    if let Some(out) = &spec.out {
        let rows: Vec<String> = profile
            .samples
            .iter()
            .map(|(v, rho)| format!("{v},{rho}"))
            .collect();
        csv_write(out, "time,rho", &rows)?;
    }
    Ok(serde_json::to_value(&profile)?)
}

fn run_perturbation(
    spec: &ExperimentSpec,
    rule: &RuleTable,
    cache: &mut ProfileCache,
) -> Result<serde_json::Value> {
    require(spec.t.len() == 1, "perturbation takes exactly one --t")?;
    require(
        spec.delta.len() >= 2,
        "perturbation needs at least two --delta values",
    )?;
    let v = spec.t[0];
    let entry = cache.get(rule, v, hydro::DEFAULT_STEPS, 0.0)?;
    let n = spec.grid.unwrap_or(spectral::DEFAULT_NYSTROM_N);
    let scan = spectral::perturbation_scan(&entry.1, v, &spec.delta, n)?;
    if let Some(out) = &spec.out {
        let rows: Vec<String> = scan
            .rows
            .iter()
            .map(|r| format!("{},{},{}", r.delta, r.rho_delta, r.diff))
            .collect();
        csv_write(out, "delta,rho_delta,diff", &rows)?;
    }
    Ok(serde_json::to_value(&scan)?)
}

fn run_simulate(spec: &ExperimentSpec, rule: &RuleTable) -> Result<serde_json::Value> {
    let n = one_n(spec)?;
    require(!spec.t.is_empty(), "simulate needs checkpoint times in --t")?;
    require(n <= u64::from(u32::MAX), "n exceeds the vertex-index range")?;
    let n = n as u32;
    let t_max = spec.t.iter().cloned().fold(0.0, f64::max);
    let mut checkpoints = spec.t.clone();
    checkpoints.sort_unstable_by(f64::total_cmp);
    let opts = RunOptions::default();
    let results: Vec<_> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(spec.seed, ExperimentKind::Simulate, u64::from(trial));
            graphsim::run_continuous(rule, n, t_max, &checkpoints, &mut rng, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = &spec.out {
        let with_trial = spec.trials > 1;
        let mut rows = Vec::new();
        for (trial, result) in results.iter().enumerate() {
            rows.extend(census_csv_rows(
                rule.k(),
                &result.censuses,
                with_trial.then_some(trial as u32),
            ));
        }
        csv_write(out, &census_csv_header(rule.k(), with_trial), &rows)?;
    }
    let final_l1: Vec<u32> = results
        .iter()
        .map(|r| r.censuses.last().map(|c| c.l1).unwrap_or(1))
        .collect();
    Ok(serde_json::json!({
        "rule": rule.name(),
        "n": n,
        "t_max": t_max,
        "trials": spec.trials,
        "mode": "quadruple",
        "final_l1": final_l1,
    }))
}

fn run_rgiva(
    spec: &ExperimentSpec,
    rule: &RuleTable,
    cache: &mut ProfileCache,
) -> Result<serde_json::Value> {
    let n_int = one_n(spec)?;
    let n = n_int as f64;
    require(spec.t.len() == 1, "rgiva takes exactly one --t")?;
    let t = spec.t[0];
    let delta = effective_delta(spec, n_int)?;
    let entry = cache.get(rule, t, hydro::DEFAULT_STEPS, delta)?;
    let profile = &entry.1;
    let samples: Vec<rgiva::RootComponentSample> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(spec.seed, ExperimentKind::Rgiva, u64::from(trial));
            rgiva::conditioned_root_component(profile, n, t, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = &spec.out {
        let rows: Vec<String> = samples
            .iter()
            .enumerate()
            .map(|(trial, s)| format!("{trial},{},{},{}", s.volume, s.component_size, s.cloud_size))
            .collect();
        csv_write(out, "trial,volume,component_size,cloud_size", &rows)?;
    }
    let mut volumes: Vec<f64> = samples.iter().map(|s| s.volume).collect();
    volumes.sort_unstable_by(f64::total_cmp);
    Ok(serde_json::json!({
        "rule": rule.name(),
        "n": n,
        "t": t,
        "delta": delta,
        "trials": spec.trials,
        "mean_volume": volumes.iter().sum::<f64>() / volumes.len().max(1) as f64,
        "quantiles": quantile_summary(&volumes),
    }))
}

fn run_branching(
    spec: &ExperimentSpec,
    rule: &RuleTable,
    cache: &mut ProfileCache,
) -> Result<serde_json::Value> {
    require(spec.t.len() == 1, "branching takes exactly one --t")?;
    let t = spec.t[0];
    let delta = effective_delta(spec, spec.n.first().copied().unwrap_or(0))?;
    let entry = cache.get(rule, t, hydro::DEFAULT_STEPS, delta)?;
    let profile = &entry.1;
    let cap = branching::default_progeny_cap(rule.k());
    let chunks: Vec<(Vec<branching::ProgenySample>, branching::SamplerDiagnostics)> = (0
        ..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(spec.seed, ExperimentKind::Branching, u64::from(trial));
            let mut sampler = BranchingSampler::new(profile, t)?;
            let sample = sampler.total_progeny(cap, &mut rng)?;
            Ok((vec![sample], sampler.diagnostics()))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<&branching::ProgenySample> =
        chunks.iter().flat_map(|(s, _)| s.iter()).collect();
    let truncated = samples.iter().filter(|s| s.truncated).count();
    let cap_hits: u64 = chunks.iter().map(|(_, d)| d.cap_hits).sum();
    let proposals: u64 = chunks.iter().map(|(_, d)| d.proposals).sum();
    if let Some(out) = &spec.out {
        let rows: Vec<String> = samples
            .iter()
            .enumerate()
            .map(|(trial, s)| {
                format!(
                    "{trial},{},{},{}",
                    s.total_volume,
                    s.generation_volumes.len(),
                    s.truncated
                )
            })
            .collect();
        csv_write(out, "trial,total_volume,generations,truncated", &rows)?;
    }
    let mut volumes: Vec<f64> = samples
        .iter()
        .filter(|s| !s.truncated)
        .map(|s| s.total_volume)
        .collect();
    volumes.sort_unstable_by(f64::total_cmp);
    let cap_hit_rate = if proposals == 0 {
        0.0
    } else {
        cap_hits as f64 / proposals as f64
    };
    Ok(serde_json::json!({
        "rule": rule.name(),
        "t": t,
        "delta": delta,
        "trials": spec.trials,
        "truncated": truncated,
        "cap_hit_rate": cap_hit_rate,
        "mean_volume": volumes.iter().sum::<f64>() / volumes.len().max(1) as f64,
        "quantiles": quantile_summary(&volumes),
    }))
}

fn quantile_summary(sorted: &[f64]) -> serde_json::Value {
    serde_json::json!({
        "q50": quantile(sorted, 0.5),
        "q90": quantile(sorted, 0.9),
        "q99": quantile(sorted, 0.99),
    })
}

/// Empirical quantile by the order statistic at ceil(alpha * n) (lower tail
/// inclusive); input must be sorted.
pub fn quantile(sorted: &[f64], alpha: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((alpha * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// One cell of the scaling table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: u64,
    pub t: f64,
    pub trials: u32,
    pub median_l1: f64,
    pub max_l1: u32,
    /// Median over trials of R = L1 (t_c - t)^2 / log n.
    pub median_ratio: f64,
    /// Max over trials of R.
    pub max_ratio: f64,
}

/// Scaling-law sweep result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rule_name: String,
    pub t_c: f64,
    pub lambda: f64,
    pub rows: Vec<ScalingRow>,
    /// (min, max) of the per-cell median ratios.
    pub band: (f64, f64),
    /// Largest single-trial ratio anywhere in the sweep.
    pub max_ratio_overall: f64,
}

/// Runs the largest-component scaling sweep `R = L1 (t_c - t)^2 / log n`.
///
/// Each trial runs one trajectory per n to the largest requested time and
/// reads L1 at every checkpoint (monotone coupling across t within a trial).
/// Every (n, t) must satisfy the subcritical window `t <= t_c - lambda
/// n^{-1/3}`.
pub fn scaling_experiment(
    rule: &RuleTable,
    t_c: f64,
    cells: &[(u64, Vec<f64>)],
    trials: u32,
    lambda: f64,
    master: u64,
) -> Result<ScalingTable> {
    require(trials >= 1, "scaling needs at least one trial")?;
    for (n, ts) in cells {
        require(!ts.is_empty(), "scaling needs a nonempty t list per n")?;
        require(
            *n >= 4 && *n <= u64::from(u32::MAX),
            "scaling n out of range",
        )?;
        let cutoff = t_c - lambda * (*n as f64).powf(-1.0 / 3.0);
        for t in ts {
            if *t > cutoff + 1e-12 {
                return Err(Error::Validation(format!(
                    "t = {t} violates the window t <= t_c - lambda n^(-1/3) = {cutoff} at n = {n}"
                )));
            }
            require(*t > 0.0, "scaling times must be positive")?;
        }
    }
    let mut rows = Vec::new();
    for (cell_idx, (n, ts)) in cells.iter().enumerate() {
        let mut checkpoints = ts.clone();
        checkpoints.sort_unstable_by(f64::total_cmp);
        let t_max = *checkpoints.last().unwrap();
        let l1_per_trial: Vec<Vec<u32>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(
                    master,
                    ExperimentKind::Scaling,
                    (cell_idx as u64) << 32 | u64::from(trial),
                );
                let result = graphsim::run_continuous(
                    rule,
                    *n as u32,
                    t_max,
                    &checkpoints,
                    &mut rng,
                    &RunOptions::default(),
                )?;
                Ok(result.censuses.iter().map(|c| c.l1).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let log_n = (*n as f64).ln();
        for (slot, t) in checkpoints.iter().enumerate() {
            let mut l1s: Vec<u32> = l1_per_trial.iter().map(|row| row[slot]).collect();
            l1s.sort_unstable();
            let ratios: Vec<f64> = l1s
                .iter()
                .map(|l1| f64::from(*l1) * (t_c - t).powi(2) / log_n)
                .collect();
            rows.push(ScalingRow {
                n: *n,
                t: *t,
                trials,
                median_l1: f64::from(l1s[l1s.len() / 2]),
                max_l1: *l1s.last().unwrap(),
                median_ratio: ratios[ratios.len() / 2],
                max_ratio: ratios.iter().cloned().fold(0.0, f64::max),
            });
        }
    }
    let band = (
        rows.iter().map(|r| r.median_ratio).fold(f64::INFINITY, f64::min),
        rows.iter().map(|r| r.median_ratio).fold(0.0, f64::max),
    );
    let max_ratio_overall = rows.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
    Ok(ScalingTable {
        rule_name: rule.name().to_string(),
        t_c,
        lambda,
        rows,
        band,
        max_ratio_overall,
    })
}

fn run_scaling(spec: &ExperimentSpec, rule: &RuleTable) -> Result<serde_json::Value> {
    require(!spec.n.is_empty(), "scaling needs at least one --n")?;
    require(!spec.t.is_empty(), "scaling needs a nonempty --t list")?;
    let (report, _, _) = spectral::critical_time(rule, &CriticalOptions::default())?;
    let cells: Vec<(u64, Vec<f64>)> =
        spec.n.iter().map(|n| (*n, spec.t.clone())).collect();
    let table = scaling_experiment(rule, report.t_c, &cells, spec.trials, 1.0, spec.seed)?;
    if let Some(out) = &spec.out {
        let rows: Vec<String> = table
            .rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.n, r.t, r.trials, r.median_l1, r.max_l1, r.median_ratio, r.max_ratio
                )
            })
            .collect();
        csv_write(
            out,
            "n,t,trials,median_l1,max_l1,median_ratio,max_ratio",
            &rows,
        )?;
    }
    Ok(serde_json::to_value(&table)?)
}

/// One quantile row of the coupling comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingRow {
    pub alpha: f64,
    pub q_discrete: f64,
    pub q_continuous: f64,
    /// Monte Carlo slack: 2 * combined bootstrap SE of the two quantiles.
    pub margin: f64,
    pub dominated: bool,
}

/// Discrete-vs-continuous coupling comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingReport {
    pub rule_name: String,
    pub n: u64,
    pub t: f64,
    /// Continuous arm horizon `t + log n / sqrt(n)`.
    pub t_shifted: f64,
    pub trials: u32,
    pub rows: Vec<CouplingRow>,
    /// Fraction of continuous trials whose event count sits within
    /// `4 sqrt(n)` of `n t'/2`.
    pub event_concentration: f64,
    pub all_dominated: bool,
}

/// Compares discrete-time L1 at `t` against continuous-time L1 at
/// `t + log n / sqrt(n)` at quantiles {0.5, 0.9, 0.99}.
pub fn coupling_experiment(
    rule: &RuleTable,
    n: u64,
    t: f64,
    trials: u32,
    master: u64,
) -> Result<CouplingReport> {
    require(n >= 4 && n <= u64::from(u32::MAX), "coupling n out of range")?;
    require(t >= 0.0, "coupling t must be nonnegative")?;
    require(trials >= 20, "coupling needs at least 20 trials")?;
    let n32 = n as u32;
    let nf = n as f64;
    let t_shifted = t + nf.ln() / nf.sqrt();
    let steps = (nf * t / 2.0).round() as u64;
    let opts = RunOptions {
        labeling: TimeLabeling::SortedUniform,
        ..RunOptions::default()
    };
    let arms: Vec<(u32, u32, u64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng_d = trial_rng(master, ExperimentKind::Coupling, u64::from(trial) << 1);
            let disc = graphsim::run_discrete(
                rule,
                n32,
                steps,
                &[steps],
                &mut rng_d,
                &RunOptions::default(),
            )?;
            let mut rng_c =
                trial_rng(master, ExperimentKind::Coupling, (u64::from(trial) << 1) | 1);
            let cont =
                graphsim::run_continuous(rule, n32, t_shifted, &[t_shifted], &mut rng_c, &opts)?;
            Ok((
                disc.censuses[0].l1,
                cont.censuses[0].l1,
                cont.events,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut disc: Vec<f64> = arms.iter().map(|a| f64::from(a.0)).collect();
    let mut cont: Vec<f64> = arms.iter().map(|a| f64::from(a.1)).collect();
    disc.sort_unstable_by(f64::total_cmp);
    cont.sort_unstable_by(f64::total_cmp);
    let within = arms
        .iter()
        .filter(|a| (a.2 as f64 - nf * t_shifted / 2.0).abs() <= 4.0 * nf.sqrt())
        .count();
    let event_concentration = within as f64 / trials as f64;

    // Bootstrap SEs of each quantile (resampling indices deterministically).
    let mut boot_rng = trial_rng(master, ExperimentKind::Coupling, u64::MAX);
    let rows: Vec<CouplingRow> = [0.5, 0.9, 0.99]
        .iter()
        .map(|alpha| {
            let qd = quantile(&disc, *alpha);
            let qc = quantile(&cont, *alpha);
            let se_d = bootstrap_quantile_se(&disc, *alpha, 200, &mut boot_rng);
            let se_c = bootstrap_quantile_se(&cont, *alpha, 200, &mut boot_rng);
            let margin = 2.0 * (se_d * se_d + se_c * se_c).sqrt();
            CouplingRow {
                alpha: *alpha,
                q_discrete: qd,
                q_continuous: qc,
                margin,
                dominated: qd <= qc + margin,
            }
        })
        .collect();
    let all_dominated = rows.iter().all(|r| r.dominated);
    Ok(CouplingReport {
        rule_name: rule.name().to_string(),
        n,
        t,
        t_shifted,
        trials,
        rows,
        event_concentration,
        all_dominated,
    })
}

/// Bootstrap standard error of the `alpha`-quantile of a sorted sample
/// (`b` resamples).
pub fn bootstrap_quantile_se<R: rand::Rng + ?Sized>(
    sorted: &[f64],
    alpha: f64,
    b: usize,
    rng: &mut R,
) -> f64 {
    let n = sorted.len();
    let mut qs = Vec::with_capacity(b);
    let mut buf = vec![0.0; n];
    for _ in 0..b {
        for slot in buf.iter_mut() {
            *slot = sorted[rng.gen_range(0..n)];
        }
        buf.sort_unstable_by(f64::total_cmp);
        qs.push(quantile(&buf, alpha));
    }
    let mean = qs.iter().sum::<f64>() / b as f64;
    (qs.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / b as f64).sqrt()
}

fn run_coupling(spec: &ExperimentSpec, rule: &RuleTable) -> Result<serde_json::Value> {
    let n = one_n(spec)?;
    require(spec.t.len() == 1, "coupling takes exactly one --t")?;
    let report = coupling_experiment(rule, n, spec.t[0], spec.trials, spec.seed)?;
    if let Some(out) = &spec.out {
        let rows: Vec<String> = report
            .rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{}",
                    r.alpha, r.q_discrete, r.q_continuous, r.margin, r.dominated
                )
            })
            .collect();
        csv_write(out, "alpha,q_discrete,q_continuous,margin,dominated", &rows)?;
    }
    Ok(serde_json::to_value(&report)?)
}

fn run_audit(
    spec: &ExperimentSpec,
    rule: &RuleTable,
    cache: &mut ProfileCache,
) -> Result<serde_json::Value> {
    let n = one_n(spec)?;
    require(
        spec.t.len() == 2 && spec.t[0] < spec.t[1],
        "audit takes --t <lo> <hi>",
    )?;
    require(n <= u64::from(u32::MAX), "n exceeds the vertex-index range")?;
    let entry = cache.get(rule, spec.t[1], hydro::DEFAULT_STEPS, 0.0)?;
    let mut rng = trial_rng(spec.seed, ExperimentKind::Audit, 0);
    let report = graphsim::rate_audit(
        rule,
        &entry.1,
        n as u32,
        (spec.t[0], spec.t[1]),
        &mut rng,
    )?;
    if let Some(out) = &spec.out {
        let rows: Vec<String> = report
            .rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{}",
                    r.label, r.observed, r.predicted, r.ratio, r.z, r.pass
                )
            })
            .collect();
        csv_write(out, "event,observed,predicted,ratio,z,pass", &rows)?;
    }
    Ok(serde_json::to_value(&report)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::builtin;
    use rand::RngCore;

    #[test]
    fn trial_streams_are_distinct_and_reproducible() {
        let mut a = trial_rng(7, ExperimentKind::Simulate, 0);
        let mut b = trial_rng(7, ExperimentKind::Simulate, 1);
        let mut c = trial_rng(7, ExperimentKind::Branching, 0);
        let mut a2 = trial_rng(7, ExperimentKind::Simulate, 0);
        let va = a.next_u64();
        assert_ne!(va, b.next_u64());
        assert_ne!(va, c.next_u64());
        assert_eq!(va, a2.next_u64());
    }

    #[test]
    fn cache_returns_identical_solution() {
        let bf = builtin("bf").unwrap();
        let mut cache = ProfileCache::new();
        let first = cache.get(&bf, 1.0, 2000, 0.0).unwrap();
        let again = cache.get(&bf, 1.0, 2000, 0.0).unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        let fresh = hydro::solve_master_ode(&bf, 1.0, 2000).unwrap();
        for (a, b) in first.0.states.iter().zip(&fresh.states) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        // Different delta is a different entry.
        let inflated = cache.get(&bf, 1.0, 2000, 0.1).unwrap();
        assert!(!Arc::ptr_eq(&first, &inflated));
        assert_eq!(inflated.1.delta, 0.1);
    }

    #[test]
    fn identical_spec_reproduces_payload_bytes() {
        let spec = ExperimentSpec {
            kind: ExperimentKind::Simulate,
            rule: "bf".into(),
            n: vec![2000],
            t: vec![0.4, 0.8],
            trials: 3,
            seed: 11,
            grid: None,
            delta: vec![],
            gamma: None,
            out: None,
        };
        let a = run(&spec).unwrap();
        let b = run(&spec).unwrap();
        assert_eq!(
            serde_json::to_string(&a.payload).unwrap(),
            serde_json::to_string(&b.payload).unwrap()
        );
    }

    #[test]
    fn simulate_writes_contracted_csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run.csv");
        let spec = ExperimentSpec {
            kind: ExperimentKind::Simulate,
            rule: "bf".into(),
            n: vec![500],
            t: vec![0.5, 1.0],
            trials: 1,
            seed: 3,
            grid: None,
            delta: vec![],
            gamma: None,
            out: Some(out.clone()),
        };
        run(&spec).unwrap();
        let csv = std::fs::read_to_string(&out).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "time,x1,x_omega,L1,S2");
        assert_eq!(lines.count(), 2);
        let sidecar = std::fs::read_to_string(sidecar_path(&out)).unwrap();
        let record: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(record["experiment"], "simulate");
        assert!(record["wall_time_s"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn scaling_rejects_out_of_window_times() {
        let bf = builtin("bf").unwrap();
        let err = scaling_experiment(&bf, 1.176, &[(1000, vec![1.17])], 2, 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = scaling_experiment(&bf, 1.176, &[(1000, vec![])], 2, 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn scaling_medians_nondecreasing_in_t() {
        let bf = builtin("bf").unwrap();
        let t_c = 1.176;
        let table = scaling_experiment(
            &bf,
            t_c,
            &[(20_000, vec![0.6, 0.8, 1.0])],
            10,
            1.0,
            99,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 3);
        let medians: Vec<f64> = table.rows.iter().map(|r| r.median_l1).collect();
        assert!(
            medians.windows(2).all(|w| w[0] <= w[1]),
            "medians {medians:?}"
        );
        assert!(table.band.0 > 0.0 && table.band.1 >= table.band.0);
        assert!(table.max_ratio_overall >= table.band.1);
    }

    #[test]
    fn coupling_trivial_time_is_degenerate_equal() {
        let bf = builtin("bf").unwrap();
        let report = coupling_experiment(&bf, 1000, 0.0, 25, 5).unwrap();
        for row in &report.rows {
            assert_eq!(row.q_discrete, 1.0);
            assert!(row.dominated);
        }
    }

    #[test]
    fn quantile_convention() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.0);
        assert_eq!(quantile(&xs, 0.9), 4.0);
        assert_eq!(quantile(&xs, 0.01), 1.0);
    }

    #[test]
    fn audit_spec_runs_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("audit.csv");
        let spec = ExperimentSpec {
            kind: ExperimentKind::Audit,
            rule: "bf".into(),
            n: vec![100_000],
            t: vec![0.1, 0.5],
            trials: 1,
            seed: 21,
            grid: None,
            delta: vec![],
            gamma: None,
            out: Some(out.clone()),
        };
        let record = run(&spec).unwrap();
        assert_eq!(record.payload["all_pass"], serde_json::json!(true));
        let csv = std::fs::read_to_string(&out).unwrap();
        assert!(csv.starts_with("event,observed,predicted"));
    }

    #[test]
    fn tc_spec_reports_supercritical_onset_above_one() {
        let spec = ExperimentSpec {
            kind: ExperimentKind::Tc,
            rule: "bf".into(),
            n: vec![],
            t: vec![],
            trials: 1,
            seed: 0,
            grid: Some(4000),
            delta: vec![],
            gamma: None,
            out: None,
        };
        let record = run(&spec).unwrap();
        let t_c = record.payload["t_c"].as_f64().unwrap();
        assert!(t_c > 1.0, "t_c = {t_c}");
    }
}
