//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skt_core::config::{prepare, PreparedRun, RunConfig};
use skt_core::convergence::{em_strong_order, grid_refinement_study, wong_zakai_study, StudySetup};
use skt_core::diagnostics::{fractional_seminorm, production, trapezoid};
use skt_core::ensemble::{gronwall_check, run_ensemble, EnsembleConfig, EnsembleStats, Functional};
use skt_core::integrators::{simulate_path, Scheme, StepConfig, Trajectory};
use skt_core::model::{a5_constant_estimate, detailed_balance_solve, entropy, ModelParams, SpeciesFields};
use skt_core::noise::{sample_path_stream, WienerPath};
use skt_core::runner::gronwall_times;
use skt_core::SktError;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> (RunConfig, PreparedRun) {
    let cfg = RunConfig::from_path(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    let prepared = prepare(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
    (cfg, prepared)
}

fn deterministic_run(p: &PreparedRun, t_final: f64, dt: f64) -> Trajectory {
    let step = StepConfig { dt, ..p.step.clone() };
    let path = WienerPath::zero(p.params.n, t_final, 1).unwrap();
    simulate_path(&p.u0, &path, &p.params, &step, 1).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn entropy_dissipation() -> Outcome {
    let (cfg, p) = load("entropy_dissipation.toml");
    let start = Instant::now();
    let traj = deterministic_run(&p, cfg.time.t_final, 1e-3);
    let elapsed = start.elapsed().as_secs_f64();
    let h: Vec<f64> = traj.states.iter().map(|s| entropy(s, &p.params).total).collect();
    let slack = 10.0 * p.step.newton_tol;
    let worst = h.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let pass = traj.is_completed() && traj.times.len() == 501 && worst <= slack && elapsed < 5.0;
    outcome(
        pass,
        format!(
            "{} steps, max H(k+1)-H(k) = {worst:.3e} (allowed {slack:.0e}), H: {:.6} -> {:.6}, runtime {elapsed:.2}s (< 5s)",
            traj.times.len() - 1,
            h[0],
            h[h.len() - 1]
        ),
    )
}

fn entropy_production_identity() -> Outcome {
    let (cfg, p) = load("entropy_dissipation.toml");
    let traj = deterministic_run(&p, cfg.time.t_final, 1e-4);
    let h0 = entropy(&traj.states[0], &p.params).total;
    let ht = entropy(traj.terminal_state(), &p.params).total;
    let prod: Vec<f64> = traj.states.iter().map(|s| production(s, &p.params)).collect();
    let integral = trapezoid(&traj.times, &prod);
    let rel = (h0 - ht - integral).abs() / (h0 - ht);
    outcome(
        traj.is_completed() && rel <= 0.05,
        format!("H(0)-H(T) = {:.6e}, integrated production = {integral:.6e}, relative gap {rel:.3e} (<= 5e-2)", h0 - ht),
    )
}

fn mass_conservation() -> Outcome {
    let (cfg, p) = load("entropy_dissipation.toml");
    let mut worst: f64 = 0.0;
    let mut completed = true;
    for dt in [1e-3, 1e-4] {
        let traj = deterministic_run(&p, cfg.time.t_final, dt);
        completed &= traj.is_completed();
        let m0 = traj.states[0].masses();
        for s in &traj.states {
            for (m, m_ref) in s.masses().iter().zip(&m0) {
                worst = worst.max((m - m_ref).abs() / m_ref);
            }
        }
    }
    outcome(
        completed && worst <= 1e-10,
        format!("max relative per-species mass drift {worst:.3e} over all steps at dt = 1e-3 and 1e-4 (<= 1e-10)"),
    )
}

fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
    let n = rng.random_range(1..=3usize);
    let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let mut sym = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = if rng.random_bool(0.8) { rng.random_range(0.0..2.0) } else { 0.0 };
            sym[i][j] = v;
            sym[j][i] = v;
        }
    }
    // π_i a_ij = sym_ij is symmetric by construction
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| sym[i][j] / pi[i]).collect()).collect();
    let a0: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
    let gamma = rng.random_range(0.1..=1.0);
    let sigma = rng.random_range(0.2..4.0);
    ModelParams::new(a0, a, Some(pi), gamma, sigma).expect("detailed balance holds by construction")
}

fn positivity() -> Outcome {
    let (cfg, base) = load("positivity_base.toml");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ensemble.base_seed);
    let floor = base.step.positivity_floor;
    let steps = cfg.noise_steps().unwrap();
    let mut min_all = f64::INFINITY;
    let mut min_after_step = f64::INFINITY;
    let mut implicit_min = f64::INFINITY;
    let (mut paths, mut stopped, mut clamps) = (0usize, 0usize, 0usize);
    for case in 0..100u64 {
        let params = random_params(&mut rng);
        let cells: Vec<Vec<f64>> =
            (0..params.n).map(|_| (0..base.grid.num_cells()).map(|_| 10f64.powf(rng.random_range(-4.0..0.5))).collect()).collect();
        let u0 = SpeciesFields::new(base.grid, cells).unwrap();
        let scheme = if case % 2 == 0 { Scheme::EmIto } else { Scheme::WongZakai };
        let step = StepConfig { scheme, ..base.step.clone() };
        for k in 0..cfg.ensemble.m_paths as u64 {
            let path = sample_path_stream(cfg.ensemble.base_seed + case, k, params.n, cfg.time.t_final, steps).unwrap();
            let traj = simulate_path(&u0, &path, &params, &step, 1).unwrap();
            paths += 1;
            stopped += usize::from(!traj.is_completed());
            clamps += traj.clamp_events();
            for (idx, s) in traj.states.iter().enumerate() {
                min_all = min_all.min(s.min_value());
                if idx > 0 {
                    min_after_step = min_after_step.min(s.min_value());
                }
            }
        }
        let implicit = StepConfig { scheme: Scheme::EntropyImplicit, dt: 1e-2, ..base.step.clone() };
        let traj = simulate_path(&u0, &WienerPath::zero(params.n, cfg.time.t_final, 1).unwrap(), &params, &implicit, 1).unwrap();
        for s in &traj.states[1..] {
            implicit_min = implicit_min.min(s.min_value());
        }
    }
    outcome(
        min_all >= 0.0 && min_after_step >= floor && implicit_min >= floor,
        format!(
            "100 configs, {paths} noisy paths ({stopped} not completed, {clamps} clamps): min state {min_all:.3e} (>= 0), \
             min after a step {min_after_step:.3e}, min implicit state {implicit_min:.3e} (>= floor {floor:.0e})"
        ),
    )
}

fn gbm_setup(m_paths: usize) -> StudySetup {
    let (cfg, p) = load("gbm_homogeneous.toml");
    StudySetup {
        u0: p.u0,
        params: p.params,
        cfg: p.step,
        t_final: cfg.time.t_final,
        m_paths,
        base_seed: cfg.ensemble.base_seed,
        threads: None,
    }
}

fn em_strong_order_slope() -> Outcome {
    let setup = gbm_setup(10_000);
    let start = Instant::now();
    let study = em_strong_order(&setup, &[4, 5, 6, 7, 8, 9, 10]).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let rms: Vec<String> = study.rows.iter().map(|r| format!("{:.3e}", r.rms)).collect();
    outcome(
        (0.4..=0.6).contains(&study.slope) && elapsed < 60.0,
        format!(
            "slope {:.4} in [0.4, 0.6] over eta = 2^-4..2^-10, 10^4 paths, rms [{}], runtime {elapsed:.1}s (< 60s)",
            study.slope,
            rms.join(", ")
        ),
    )
}

fn wong_zakai_to_ito() -> Outcome {
    let setup = gbm_setup(10_000);
    let study = wong_zakai_study(&setup, &[4, 5, 6, 7, 8, 9]).unwrap();
    let final_rms = study.ito.rows.last().unwrap().rms;
    let ratio = study.stratonovich.rows.last().unwrap().mean_ratio;
    let rms: Vec<String> = study.ito.rows.iter().map(|r| format!("{:.3e}", r.rms)).collect();
    outcome(
        study.ito.monotone && final_rms <= 0.03 && (ratio - 1.0).abs() <= 0.01,
        format!(
            "corrected rms vs Ito [{}] monotone = {}, final {final_rms:.3e} (<= 0.03); uncorrected mean ratio to exp(W/2) {ratio:.6} (within 1%)",
            rms.join(", "),
            study.ito.monotone
        ),
    )
}

fn martingale_mean() -> Outcome {
    let (cfg, p) = load("gbm_homogeneous.toml");
    let ens = cfg.ensemble_config(None).unwrap();
    let funcs = [Functional::TerminalStateMean, Functional::Moment(Box::new(Functional::TerminalStateMean), 2.0)];
    let stats = run_ensemble(&p.u0, &p.params, &p.step, &ens, &funcs).unwrap();
    let within = |s: &EnsembleStats, target: f64| (s.mean - target).abs() <= s.ci95_halfwidth;
    let e14 = 0.25f64.exp();
    outcome(
        ens.m_paths == 10_000 && within(&stats[0], 1.0) && within(&stats[1], e14),
        format!(
            "m = {}: E[X(1)] = {:.5} +- {:.5} (target 1), E[X(1)^2] = {:.5} +- {:.5} (target {e14:.5})",
            ens.m_paths, stats[0].mean, stats[0].ci95_halfwidth, stats[1].mean, stats[1].ci95_halfwidth
        ),
    )
}

fn gronwall_bound() -> Outcome {
    let (cfg, p) = load("gronwall_stochastic.toml");
    let ens = cfg.ensemble_config(None).unwrap();
    let times = gronwall_times(cfg.time.t_final, cfg.ensemble.gronwall_points);
    let funcs: Vec<Functional> = times.iter().map(|&t| Functional::EntropyBalanceAt(t)).collect();
    let stats = run_ensemble(&p.u0, &p.params, &p.step, &ens, &funcs).unwrap();
    let c_h = a5_constant_estimate(&p.params, cfg.ensemble.a5_box_max, cfg.ensemble.a5_samples, cfg.ensemble.base_seed).unwrap();
    let h0 = entropy(&p.u0, &p.params).total;
    let points: Vec<(f64, EnsembleStats)> = times.iter().copied().zip(stats).collect();
    let report = gronwall_check(&points, c_h, h0, 2.0);
    outcome(
        ens.m_paths == 1000 && times.len() == 20 && report.k_fit <= 2.0 && report.violations == 0,
        format!(
            "m = {}, {} times, C_h = {c_h:.4e}, H(0) = {h0:.4e}: fitted K = {:.4} (<= 2), violations {}",
            ens.m_paths,
            times.len(),
            report.k_fit,
            report.violations
        ),
    )
}

fn norm_stability() -> Outcome {
    let (cfg, p) = load("no_self_diffusion.toml");
    let study = grid_refinement_study(&p.params, &p.step, cfg.time.t_final, cfg.grid.extent[0], &cfg.convergence.grid_cells, |g| {
        cfg.build_initial(g, p.params.n)
    })
    .unwrap();
    let pair = study.lrho2_variation.iter().copied().fold(0.0, f64::max);
    let rows: Vec<String> = study
        .rows
        .iter()
        .map(|r| format!("{}: {:.5}/{:.5}", r.cells, r.lrho1_w1rho1, r.lrho2_grad_pair[0]))
        .collect();
    outcome(
        cfg.convergence.grid_cells == [32, 64, 128] && study.lrho1_variation <= 0.1 && pair <= 0.1,
        format!(
            "[{}]; spread of L^rho1(W^1,rho1) {:.3e}, of L^rho2 grad(u1 u2) {pair:.3e} (each <= 0.1)",
            rows.join(", "),
            study.lrho1_variation
        ),
    )
}

fn fractional_seminorm_oracle() -> Outcome {
    let times: Vec<f64> = (0..512).map(|k| k as f64 / 511.0).collect();
    let value = fractional_seminorm(&times, &times, 0.25).unwrap();
    let err = (value - 8.0 / 15.0).abs();
    outcome(err <= 1e-3, format!("seminorm {value:.6} vs 8/15, error {err:.3e} (<= 1e-3)"))
}

fn detailed_balance_examples() -> Outcome {
    let sym = vec![vec![0.3, 1.0, 2.0], vec![1.0, 0.0, 0.5], vec![2.0, 0.5, 1.0]];
    let uniform = detailed_balance_solve(&sym).unwrap();
    let e1 = uniform.pi.iter().map(|p| (p - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    let pair = detailed_balance_solve(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
    let e2 = (pair.pi[0] - 1.0 / 3.0).abs().max((pair.pi[1] - 2.0 / 3.0).abs());
    let cycle = detailed_balance_solve(&[vec![0.0, 1.0, 2.0], vec![2.0, 0.0, 1.0], vec![1.0, 2.0, 0.0]]);
    let rejected = matches!(&cycle, Err(SktError::Infeasible { cycle: Some(c), .. }) if c.len() == 4 && c[0] == c[3]);
    outcome(
        e1 <= 1e-12 && e2 <= 1e-12 && rejected,
        format!(
            "symmetric -> uniform (err {e1:.1e}), a12 = 2, a21 = 1 -> (1/3, 2/3) (err {e2:.1e}), 3-cycle -> {}",
            match &cycle {
                Err(e) => e.to_string(),
                Ok(db) => format!("accepted {:?}", db.pi),
            }
        ),
    )
}

fn bits(stats: &[EnsembleStats]) -> Vec<(usize, String, [u64; 4])> {
    stats
        .iter()
        .map(|s| {
            (
                s.m_paths,
                s.functional_name.clone(),
                [s.mean.to_bits(), s.variance.to_bits(), s.ci95_halfwidth.to_bits(), s.stopped_fraction.to_bits()],
            )
        })
        .collect()
}

fn thread_determinism() -> Outcome {
    let (cfg, p) = load("determinism.toml");
    let runs: Vec<_> = [1usize, 2, 8]
        .iter()
        .map(|&t| {
            let ens = EnsembleConfig { threads: Some(t), ..cfg.ensemble_config(None).unwrap() };
            bits(&run_ensemble(&p.u0, &p.params, &p.step, &ens, &cfg.ensemble.functionals).unwrap())
        })
        .collect();
    let rerun = {
        let ens = EnsembleConfig { threads: Some(1), ..cfg.ensemble_config(None).unwrap() };
        bits(&run_ensemble(&p.u0, &p.params, &p.step, &ens, &cfg.ensemble.functionals).unwrap())
    };
    let same = runs.iter().all(|r| *r == runs[0]) && rerun == runs[0];
    outcome(
        same,
        format!("{} functionals over {} paths bitwise identical at 1, 2 and 8 threads and on rerun: {same}", runs[0].len(), cfg.ensemble.m_paths),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("deterministic entropy dissipation", entropy_dissipation),
        ("entropy-production identity", entropy_production_identity),
        ("mass conservation", mass_conservation),
        ("positivity", positivity),
        ("EM strong order", em_strong_order_slope),
        ("Wong-Zakai to Ito", wong_zakai_to_ito),
        ("martingale mean and second moment", martingale_mean),
        ("Gronwall entropy bound", gronwall_bound),
        ("space-time norm stability", norm_stability),
        ("fractional seminorm oracle", fractional_seminorm_oracle),
        ("detailed balance", detailed_balance_examples),
        ("thread determinism", thread_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let status = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!("criterion {id:>2} {status} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), result.detail);
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
