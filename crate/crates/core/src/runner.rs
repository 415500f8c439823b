//! Command orchestration behind the CLI.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{prepare, PreparedRun, RunConfig};
use crate::convergence::{em_strong_order, grid_refinement_study, seminorm_study, wong_zakai_study, StudySetup};
use crate::diagnostics::{norm_report, record_trajectory, NormReport};
use crate::ensemble::{gronwall_check, run_ensemble, EnsembleStats, Functional, GronwallReport};
use crate::error::{Result, SktError};
use crate::integrators::{simulate_path, Scheme, TerminalStatus};
use crate::model::{a5_constant_estimate, entropy};
use crate::noise::{sample_path_stream, WienerPath};
use crate::records::{write_json, write_records, RunHeader, StudyRow};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ALL_STOPPED: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Ensemble,
    Convergence,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ensemble => "ensemble",
            Command::Convergence => "convergence",
            Command::Validate => "validate",
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Worker threads; never changes results.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable report.
    pub summary: String,
}

/// Process exit code for an error.
pub fn exit_code(err: &SktError) -> i32 {
    match err {
        SktError::ConfigRejected { .. } | SktError::Parse(_) | SktError::Infeasible { .. } | SktError::Domain(_) => {
            EXIT_CONFIG
        }
        SktError::NewtonFailure { .. } | SktError::NormUnavailable(_) => EXIT_NUMERICAL,
        SktError::EnsembleDegenerate => EXIT_ALL_STOPPED,
        SktError::Io(_) => 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub terminal_status: TerminalStatus,
    pub snapshots: usize,
    pub clamp_events: usize,
    pub norms: Option<NormReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub stats: Vec<EnsembleStats>,
    pub gronwall: Option<GronwallReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub em_slope: Option<f64>,
    pub em_monotone: Option<bool>,
    pub wz_ito_monotone: Option<bool>,
    pub wz_ito_final_rms: Option<f64>,
    pub wz_stratonovich_final_ratio: Option<f64>,
    pub grid_lrho1_variation: Option<f64>,
    pub grid_lrho2_variation: Option<Vec<f64>>,
}

/// Runs `command` on `cfg`. Errors before any output is produced carry
/// their exit code via [`exit_code`]; a completed run reports its own.
pub fn run(cfg: &RunConfig, command: Command, opts: &RunOptions) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.ensemble.base_seed = seed;
    }
    let prepared = prepare(&cfg)?;
    let header = RunHeader::new(cfg.config_hash(), cfg.ensemble.base_seed, command.name());
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    match command {
        Command::Validate => {
            let mut summary = String::new();
            let r = &prepared.report;
            writeln!(summary, "config {} accepted", header.config_hash).unwrap();
            writeln!(summary, "n = {}, d = {}, regime = {:?}", r.n, r.dims, r.regime).unwrap();
            writeln!(summary, "pi = {:?}{}", r.pi, if r.pi_solved { " (solved)" } else { "" }).unwrap();
            for w in &r.warnings {
                writeln!(summary, "warning: {w}").unwrap();
            }
            Ok(RunOutcome { exit_code: 0, artifacts: Vec::new(), summary })
        }
        Command::Simulate => simulate(&cfg, &prepared, &header, out_dir),
        Command::Ensemble => ensemble(&cfg, &prepared, &header, out_dir, opts.threads),
        Command::Convergence => convergence(&cfg, &prepared, &header, out_dir, opts.threads),
    }
}

fn simulate(cfg: &RunConfig, p: &PreparedRun, header: &RunHeader, out: PathBuf) -> Result<RunOutcome> {
    let t = cfg.time.t_final;
    let steps = cfg.noise_steps()?;
    let path = if p.step.scheme == Scheme::EntropyImplicit {
        WienerPath::zero(p.params.n, t, steps)?
    } else {
        sample_path_stream(cfg.ensemble.base_seed, 0, p.params.n, t, steps)?
    };
    let traj = simulate_path(&p.u0, &path, &p.params, &p.step, cfg.output.stride)?;
    let records = record_trajectory(&traj, &p.params);
    let mut artifacts = Vec::new();
    for &f in &cfg.output.formats {
        artifacts.push(write_records(&out, "diagnostics", &records, f, Some(header))?);
    }
    let summary = SimulateSummary {
        terminal_status: traj.terminal_status,
        snapshots: traj.times.len(),
        clamp_events: traj.clamp_events(),
        norms: norm_report(&traj, &p.params).ok(),
    };
    let path = out.join("simulate_summary.json");
    write_json(&path, header, &summary)?;
    artifacts.push(path);
    let exit_code = match traj.terminal_status {
        TerminalStatus::Completed => 0,
        TerminalStatus::StoppedAtGuard { .. } => EXIT_ALL_STOPPED,
        TerminalStatus::NewtonFailure { .. } => EXIT_NUMERICAL,
    };
    let text = format!(
        "{} snapshots, status {:?}, final entropy {}\n",
        summary.snapshots,
        summary.terminal_status,
        records.last().map_or(f64::NAN, |r| r.entropy)
    );
    Ok(RunOutcome { exit_code, artifacts, summary: text })
}

/// Equally spaced times `0, T/(P-1), ..., T`.
pub fn gronwall_times(t_final: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![t_final],
        p => (0..p).map(|k| t_final * k as f64 / (p - 1) as f64).collect(),
    }
}

fn ensemble(
    cfg: &RunConfig,
    p: &PreparedRun,
    header: &RunHeader,
    out: PathBuf,
    threads: Option<usize>,
) -> Result<RunOutcome> {
    let ens = cfg.ensemble_config(threads)?;
    let mut functionals = cfg.ensemble.functionals.clone();
    let user_count = functionals.len();
    let times = gronwall_times(cfg.time.t_final, cfg.ensemble.gronwall_points);
    functionals.extend(times.iter().map(|&t| Functional::EntropyBalanceAt(t)));
    let all = run_ensemble(&p.u0, &p.params, &p.step, &ens, &functionals)?;

    let gronwall = if times.is_empty() {
        None
    } else {
        let c_h = a5_constant_estimate(&p.params, cfg.ensemble.a5_box_max, cfg.ensemble.a5_samples, cfg.ensemble.base_seed)?;
        let h0 = entropy(&p.u0, &p.params).total;
        let points: Vec<(f64, EnsembleStats)> = times.iter().copied().zip(all[user_count..].iter().cloned()).collect();
        Some(gronwall_check(&points, c_h, h0, cfg.ensemble.gronwall_k_cap))
    };

    let mut artifacts = Vec::new();
    for &f in &cfg.output.formats {
        artifacts.push(write_records(&out, "ensemble", &all, f, Some(header))?);
    }
    let summary = EnsembleSummary { stats: all[..user_count].to_vec(), gronwall };
    let path = out.join("ensemble_summary.json");
    write_json(&path, header, &summary)?;
    artifacts.push(path);

    let mut text = String::new();
    writeln!(text, "{:<28} {:>8} {:>16} {:>14} {:>14} {:>8}", "functional", "paths", "mean", "variance", "ci95", "stopped").unwrap();
    for s in &all {
        writeln!(
            text,
            "{:<28} {:>8} {:>16.8e} {:>14.6e} {:>14.6e} {:>8.4}",
            s.functional_name, s.m_paths, s.mean, s.variance, s.ci95_halfwidth, s.stopped_fraction
        )
        .unwrap();
    }
    if let Some(g) = &summary.gronwall {
        writeln!(text, "gronwall: C_h = {:.6e}, fitted K = {:.6}, violations at K = {}: {}", g.c_h, g.k_fit, g.k_cap, g.violations)
            .unwrap();
    }
    Ok(RunOutcome { exit_code: 0, artifacts, summary: text })
}

fn convergence(
    cfg: &RunConfig,
    p: &PreparedRun,
    header: &RunHeader,
    out: PathBuf,
    threads: Option<usize>,
) -> Result<RunOutcome> {
    let c = &cfg.convergence;
    let setup = StudySetup {
        u0: p.u0.clone(),
        params: p.params.clone(),
        cfg: p.step.clone(),
        t_final: cfg.time.t_final,
        m_paths: c.m_paths,
        base_seed: cfg.ensemble.base_seed,
        threads,
    };
    let mut rows = Vec::new();
    let mut summary = ConvergenceSummary {
        em_slope: None,
        em_monotone: None,
        wz_ito_monotone: None,
        wz_ito_final_rms: None,
        wz_stratonovich_final_ratio: None,
        grid_lrho1_variation: None,
        grid_lrho2_variation: None,
    };
    let mut text = String::new();
    let mut artifacts = Vec::new();

    if !c.em_levels.is_empty() {
        let em = em_strong_order(&setup, &c.em_levels)?;
        summary.em_slope = Some(em.slope);
        summary.em_monotone = Some(em.monotone);
        writeln!(text, "Euler-Maruyama strong error ({:?} reference), slope {:.4}", em.reference, em.slope).unwrap();
        for r in &em.rows {
            writeln!(text, "  eta = {:<12.6e} rms = {:.6e}", r.eta, r.rms).unwrap();
        }
        rows.extend(StudyRow::from_study("em_ito", &em));
    }
    if !c.wz_levels.is_empty() {
        let wz = wong_zakai_study(&setup, &c.wz_levels)?;
        summary.wz_ito_monotone = Some(wz.ito.monotone);
        summary.wz_ito_final_rms = wz.ito.rows.last().map(|r| r.rms);
        summary.wz_stratonovich_final_ratio = wz.stratonovich.rows.last().map(|r| r.mean_ratio);
        writeln!(text, "Wong-Zakai vs Ito / uncorrected vs Stratonovich").unwrap();
        for (a, b) in wz.ito.rows.iter().zip(&wz.stratonovich.rows) {
            writeln!(text, "  eta = {:<12.6e} rms = {:.6e}  ratio = {:.6}", a.eta, a.rms, b.mean_ratio).unwrap();
        }
        rows.extend(StudyRow::from_study("wong_zakai_ito", &wz.ito));
        rows.extend(StudyRow::from_study("wong_zakai_stratonovich", &wz.stratonovich));
    }
    for &f in &cfg.output.formats {
        artifacts.push(write_records(&out, "convergence", &rows, f, Some(header))?);
    }

    if !c.grid_cells.is_empty() {
        if cfg.grid.dims != 1 {
            return Err(SktError::rejected("convergence", "grid refinement study needs a 1D grid"));
        }
        let study = grid_refinement_study(&p.params, &p.step, cfg.time.t_final, cfg.grid.extent[0], &c.grid_cells, |g| {
            cfg.build_initial(g, p.params.n)
        })?;
        writeln!(text, "grid refinement: L^rho1(W^1,rho1) spread {:.4}, pair spreads {:?}", study.lrho1_variation, study.lrho2_variation)
            .unwrap();
        summary.grid_lrho1_variation = Some(study.lrho1_variation);
        summary.grid_lrho2_variation = Some(study.lrho2_variation.clone());
        for &f in &cfg.output.formats {
            artifacts.push(write_records(&out, "grid_refinement", &study.rows, f, Some(header))?);
        }
    }
    if c.seminorm_paths > 0 {
        let s = StudySetup { m_paths: c.seminorm_paths, ..setup.clone() };
        let levels = if c.em_levels.is_empty() { vec![4, 5, 6] } else { c.em_levels.clone() };
        let table = seminorm_study(&s, &levels, c.seminorm_alpha)?;
        for &f in &cfg.output.formats {
            artifacts.push(write_records(&out, "seminorm", &table, f, Some(header))?);
        }
    }
    let path = out.join("convergence_summary.json");
    write_json(&path, header, &summary)?;
    artifacts.push(path);
    Ok(RunOutcome { exit_code: 0, artifacts, summary: text })
}
