//! Monte Carlo over independent Wiener paths.
//!
//! Path `k` always draws its noise from stream `k` of the base seed, and the
//! per-path values are reduced sequentially in path-index order after the
//! parallel phase, so results are bitwise identical for any thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diagnostics::{cumulative_trapezoid, production};
use crate::error::{Result, SktError};
use crate::grid::integrate_of;
use crate::integrators::{simulate_path, StepConfig, Trajectory};
use crate::model::{entropy, ModelParams, SpeciesFields};
use crate::noise::sample_path_stream;

/// Path functionals the ensemble can estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// `H(u(t))`, linearly interpolated between snapshots.
    EntropyAt(f64),
    /// `sup_t Σ_i ||u_i(t)||_{L^1}`.
    SupL1,
    /// `∫_0^T production dt`.
    DissipationIntegral,
    /// `H(u(t)) + ∫_0^t production ds`.
    EntropyBalanceAt(f64),
    /// Spatial mean of the terminal state, averaged over species.
    TerminalStateMean,
    /// `|X|^p` of another functional.
    Moment(Box<Functional>, f64),
}

impl Functional {
    /// Whether the value only exists for paths that reached `T`.
    fn needs_completion(&self) -> bool {
        match self {
            Functional::EntropyAt(_) | Functional::EntropyBalanceAt(_) => false,
            Functional::Moment(base, _) => base.needs_completion(),
            _ => true,
        }
    }

    fn needs_production(&self) -> bool {
        match self {
            Functional::DissipationIntegral | Functional::EntropyBalanceAt(_) => true,
            Functional::Moment(base, _) => base.needs_production(),
            _ => false,
        }
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Functional::EntropyAt(t) => write!(f, "entropy_at({t})"),
            Functional::SupL1 => f.write_str("sup_l1"),
            Functional::DissipationIntegral => f.write_str("dissipation_integral"),
            Functional::EntropyBalanceAt(t) => write!(f, "entropy_balance_at({t})"),
            Functional::TerminalStateMean => f.write_str("terminal_state_mean"),
            Functional::Moment(base, p) => write!(f, "moment_p({base},{p})"),
        }
    }
}

impl FromStr for Functional {
    type Err = SktError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || SktError::Parse(format!("unknown functional '{s}'"));
        let arg = |prefix: &str| -> Option<&str> { s.strip_prefix(prefix)?.strip_suffix(')') };
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        match s {
            "sup_l1" => return Ok(Functional::SupL1),
            "dissipation_integral" => return Ok(Functional::DissipationIntegral),
            "terminal_state_mean" => return Ok(Functional::TerminalStateMean),
            _ => {}
        }
        if let Some(a) = arg("entropy_at(") {
            return Ok(Functional::EntropyAt(num(a)?));
        }
        if let Some(a) = arg("entropy_balance_at(") {
            return Ok(Functional::EntropyBalanceAt(num(a)?));
        }
        if let Some(a) = arg("moment_p(") {
            let (base, p) = a.rsplit_once(',').ok_or_else(bad)?;
            return Ok(Functional::Moment(Box::new(base.parse()?), num(p)?));
        }
        Err(bad())
    }
}

impl Serialize for Functional {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Functional {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Monte Carlo estimate of one functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    /// Paths contributing to the estimate.
    pub m_paths: usize,
    pub functional_name: String,
    pub mean: f64,
    /// Unbiased sample variance (0 for a single path).
    pub variance: f64,
    /// `1.96 sqrt(variance / m_paths)`.
    pub ci95_halfwidth: f64,
    /// Fraction of all simulated paths stopped by the guard.
    pub stopped_fraction: f64,
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }
}

fn stats_from(name: String, values: impl Iterator<Item = f64>, total_paths: usize, stopped: usize) -> EnsembleStats {
    let mut acc = Welford::default();
    for v in values {
        acc.push(v);
    }
    let m = acc.count();
    let variance = acc.variance();
    EnsembleStats {
        m_paths: m,
        functional_name: name,
        mean: acc.mean(),
        variance,
        ci95_halfwidth: if m > 0 { 1.96 * (variance / m as f64).sqrt() } else { 0.0 },
        stopped_fraction: if total_paths > 0 { stopped as f64 / total_paths as f64 } else { 0.0 },
    }
}

/// `E[|X|^p]` from per-path samples; `p = 1` uses `X` itself.
pub fn moment_estimate(name: &str, samples: &[f64], p: f64) -> Result<EnsembleStats> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(SktError::domain(format!("moment order must be >= 1, got {p}")));
    }
    let label = if p == 1.0 { name.to_string() } else { format!("moment_p({name},{p})") };
    let stats = if p == 1.0 {
        stats_from(label, samples.iter().copied(), samples.len(), 0)
    } else {
        stats_from(label, samples.iter().map(|x| x.abs().powf(p)), samples.len(), 0)
    };
    Ok(stats)
}

/// Sizes and seeding of an ensemble run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub m_paths: usize,
    pub base_seed: u64,
    pub t_final: f64,
    /// Noise intervals `M` (`η = T / M`).
    pub noise_steps: usize,
    pub sample_stride: usize,
    /// Worker threads; `None` uses the global pool. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// Per-path values of every requested functional.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSamples {
    pub functionals: Vec<Functional>,
    /// `values[f][k]`: functional `f` on path `k`, `None` when unavailable.
    pub values: Vec<Vec<Option<f64>>>,
    pub stopped: Vec<bool>,
}

impl PathSamples {
    pub fn stopped_count(&self) -> usize {
        self.stopped.iter().filter(|s| **s).count()
    }

    /// Available values of functional `f`, in path order.
    pub fn available(&self, f: usize) -> Vec<f64> {
        self.values[f].iter().flatten().copied().collect()
    }

    /// Statistics for each functional.
    pub fn stats(&self) -> Result<Vec<EnsembleStats>> {
        let total = self.stopped.len();
        let stopped = self.stopped_count();
        if total > 0 && stopped == total {
            return Err(SktError::EnsembleDegenerate);
        }
        Ok(self
            .functionals
            .iter()
            .enumerate()
            .map(|(f, func)| stats_from(func.to_string(), self.values[f].iter().flatten().copied(), total, stopped))
            .collect())
    }
}

/// Runs `body` on a pool with `threads` workers, or the global pool.
pub fn with_threads<R: Send>(threads: Option<usize>, body: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| SktError::domain(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(body))
        }
        None => Ok(body()),
    }
}

/// Simulates path `k` of an ensemble.
pub fn simulate_member(
    u0: &SpeciesFields,
    params: &ModelParams,
    cfg: &StepConfig,
    ens: &EnsembleConfig,
    k: usize,
) -> Result<Trajectory> {
    let path = sample_path_stream(ens.base_seed, k as u64, params.n, ens.t_final, ens.noise_steps)?;
    simulate_path(u0, &path, params, cfg, ens.sample_stride)
}

struct PathSeries {
    times: Vec<f64>,
    entropy: Vec<f64>,
    dissipation: Option<Vec<f64>>,
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> Option<f64> {
    let last = *times.last()?;
    let tol = 1e-9 * last.abs().max(1.0);
    if t < -tol || t > last + tol {
        return None;
    }
    let idx = times.partition_point(|&s| s < t - tol);
    if idx < times.len() && (times[idx] - t).abs() <= tol {
        return Some(values[idx]);
    }
    if idx == 0 || idx >= times.len() {
        return None;
    }
    let (t0, t1) = (times[idx - 1], times[idx]);
    let theta = (t - t0) / (t1 - t0);
    Some(values[idx - 1] + theta * (values[idx] - values[idx - 1]))
}

fn evaluate(func: &Functional, traj: &Trajectory, series: &PathSeries) -> Option<f64> {
    if func.needs_completion() && !traj.is_completed() {
        return None;
    }
    match func {
        Functional::EntropyAt(t) => interpolate(&series.times, &series.entropy, *t),
        Functional::EntropyBalanceAt(t) => {
            let diss = series.dissipation.as_ref()?;
            Some(interpolate(&series.times, &series.entropy, *t)? + interpolate(&series.times, diss, *t)?)
        }
        Functional::DissipationIntegral => series.dissipation.as_ref()?.last().copied(),
        Functional::SupL1 => traj
            .states
            .iter()
            .map(|s| (0..s.n()).map(|i| integrate_of(s.grid(), &s.species(i).iter().map(|v| v.abs()).collect::<Vec<_>>())).sum::<f64>())
            .reduce(f64::max),
        Functional::TerminalStateMean => {
            let s = traj.terminal_state();
            let vol = s.grid().volume();
            Some(s.masses().iter().sum::<f64>() / vol / s.n() as f64)
        }
        Functional::Moment(base, p) => {
            let v = evaluate(base, traj, series)?;
            Some(if *p == 1.0 { v } else { v.abs().powf(*p) })
        }
    }
}

/// Functional values along one simulated trajectory.
pub fn evaluate_functionals(traj: &Trajectory, params: &ModelParams, functionals: &[Functional]) -> Vec<Option<f64>> {
    let entropy_series: Vec<f64> = traj.states.iter().map(|s| entropy(s, params).total).collect();
    let dissipation = functionals.iter().any(Functional::needs_production).then(|| {
        let prod: Vec<f64> = traj.states.iter().map(|s| production(s, params)).collect();
        cumulative_trapezoid(&traj.times, &prod)
    });
    let series = PathSeries { times: traj.times.clone(), entropy: entropy_series, dissipation };
    functionals.iter().map(|f| evaluate(f, traj, &series)).collect()
}

/// Simulates all paths and returns the raw per-path samples.
pub fn sample_functionals(
    u0: &SpeciesFields,
    params: &ModelParams,
    cfg: &StepConfig,
    ens: &EnsembleConfig,
    functionals: &[Functional],
) -> Result<PathSamples> {
    if ens.m_paths == 0 {
        return Err(SktError::domain("need at least one path"));
    }
    let per_path: Vec<(Vec<Option<f64>>, bool)> = with_threads(ens.threads, || {
        (0..ens.m_paths)
            .into_par_iter()
            .map(|k| {
                let traj = simulate_member(u0, params, cfg, ens, k)?;
                Ok((evaluate_functionals(&traj, params, functionals), !traj.is_completed()))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut values = vec![Vec::with_capacity(ens.m_paths); functionals.len()];
    let mut stopped = Vec::with_capacity(ens.m_paths);
    for (vals, stop) in per_path {
        for (f, v) in vals.into_iter().enumerate() {
            values[f].push(v);
        }
        stopped.push(stop);
    }
    Ok(PathSamples { functionals: functionals.to_vec(), values, stopped })
}

/// Monte Carlo estimates of `functionals` over `ens.m_paths` paths.
pub fn run_ensemble(
    u0: &SpeciesFields,
    params: &ModelParams,
    cfg: &StepConfig,
    ens: &EnsembleConfig,
    functionals: &[Functional],
) -> Result<Vec<EnsembleStats>> {
    sample_functionals(u0, params, cfg, ens, functionals)?.stats()
}

/// Outcome of checking `E[H(t)] + E[∫_0^t production] <= K (1 + h0) e^{C_h t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub times: Vec<f64>,
    pub lhs_mean: Vec<f64>,
    pub lhs_ci95: Vec<f64>,
    /// `(1 + h0) e^{C_h t}`.
    pub envelope: Vec<f64>,
    pub c_h: f64,
    pub h0: f64,
    /// Smallest `K` for which every mean lies below `K * envelope`.
    pub k_fit: f64,
    /// `K` used to count violations.
    pub k_cap: f64,
    /// Times where `mean - ci95 > k_cap * envelope`.
    pub violations: usize,
}

/// Fits the Gronwall constant to entropy-balance statistics at increasing
/// times and counts violations of the bound with `K = k_cap`.
pub fn gronwall_check(points: &[(f64, EnsembleStats)], c_h: f64, h0: f64, k_cap: f64) -> GronwallReport {
    let times: Vec<f64> = points.iter().map(|(t, _)| *t).collect();
    let lhs_mean: Vec<f64> = points.iter().map(|(_, s)| s.mean).collect();
    let lhs_ci95: Vec<f64> = points.iter().map(|(_, s)| s.ci95_halfwidth).collect();
    let envelope: Vec<f64> = times.iter().map(|t| (1.0 + h0) * (c_h * t).exp()).collect();
    let k_fit = lhs_mean.iter().zip(&envelope).map(|(m, e)| m / e).fold(0.0, f64::max);
    let violations = lhs_mean
        .iter()
        .zip(&lhs_ci95)
        .zip(&envelope)
        .filter(|((m, ci), e)| *m - *ci > k_cap * *e)
        .count();
    GronwallReport { times, lhs_mean, lhs_ci95, envelope, c_h, h0, k_fit, k_cap, violations }
}
