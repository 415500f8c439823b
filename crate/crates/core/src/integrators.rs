//! Time stepping.
//!
//! * [`deterministic_substep`]: backward Euler for `∂_t u = Δ_h F(u) + s`,
//!   solved by Newton's method in the entropy variables `w_i = π_i log u_i`.
//!   States produced this way are strictly positive by construction.
//! * [`em_ito_step`]: Lie splitting of an Euler–Maruyama noise kick and one
//!   deterministic substep.
//! * [`wong_zakai_interval`]: the random ODE obtained by replacing `W` with
//!   its piecewise-linear interpolant, with the Itô–Stratonovich drift
//!   subtracted so the limit is the Itô solution.
//! * [`simulate_path`]: drives one of the schemes over `[0, T]` with an
//!   `L^2` blow-up guard standing in for the exit time `τ_R`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Result, SktError};
use crate::grid::Grid;
use crate::linalg::{solve_banded, solve_bicgstab, SparseRows};
use crate::model::{
    flux_jacobian_point, flux_point, sigma_diag, sigma_diag_derivative, sigma_eval, stratonovich_correction,
    ModelParams, NoiseLaw, SpeciesFields,
};
use crate::noise::WienerPath;

/// Maximum number of automatic `dt` halvings after a Newton failure.
pub const MAX_DT_HALVINGS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Deterministic backward Euler in entropy variables, noise ignored.
    EntropyImplicit,
    /// Euler–Maruyama noise kick followed by an implicit diffusion substep.
    EmIto,
    /// Wong–Zakai random ODE with Stratonovich-to-Itô drift.
    WongZakai,
}

/// How the explicit forcing is advanced inside a Wong–Zakai substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WzForcing {
    /// Forcing frozen at the substep start.
    Euler,
    /// Predictor–corrector: the forcing is averaged between the substep start
    /// and an Euler predictor.
    Heun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    /// Step of the deterministic scheme.
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Guard on the discrete `L^2` norm.
    pub blowup_r: f64,
    pub positivity_floor: f64,
    pub scheme: Scheme,
    /// Deterministic substeps per Wong–Zakai noise interval.
    pub substeps_per_noise_interval: usize,
    /// Subtract `½ Σ (∂σ/∂u) σ` in the Wong–Zakai scheme.
    pub stratonovich_correction: bool,
    pub wz_forcing: WzForcing,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            dt: 1e-3,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            blowup_r: 1e6,
            positivity_floor: 1e-12,
            scheme: Scheme::EntropyImplicit,
            substeps_per_noise_interval: 4,
            stratonovich_correction: true,
            wz_forcing: WzForcing::Heun,
        }
    }
}

impl StepConfig {
    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dt) || !positive(self.newton_tol) || !positive(self.blowup_r) || !positive(self.positivity_floor) {
            return Err(SktError::domain("dt, tolerances, floor and guard must be positive"));
        }
        if self.newton_max_iter == 0 || self.substeps_per_noise_interval == 0 {
            return Err(SktError::domain("iteration and substep counts must be at least 1"));
        }
        Ok(())
    }
}

/// Failure of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum StepError {
    #[error("Newton iteration did not converge (last residual {residual:e})")]
    NewtonFailure { residual: f64 },
    #[error("L2 norm {norm:e} exceeded the guard")]
    StoppedAtGuard { norm: f64 },
}

/// How a path simulation ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TerminalStatus {
    Completed,
    StoppedAtGuard { t: f64 },
    NewtonFailure { t: f64 },
}

/// Sampled states of one path.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpeciesFields>,
    /// Cumulative positivity-clamp count at each snapshot.
    pub clamp_counts: Vec<usize>,
    pub terminal_status: TerminalStatus,
}

impl Trajectory {
    pub fn is_completed(&self) -> bool {
        self.terminal_status == TerminalStatus::Completed
    }

    pub fn terminal_state(&self) -> &SpeciesFields {
        self.states.last().expect("trajectory has at least the initial snapshot")
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_counts.last().copied().unwrap_or(0)
    }
}

/// Result of a noise step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: SpeciesFields,
    /// Number of cell values clamped to zero after the noise kick.
    pub clamp_events: usize,
}

/// Interleaved working copy: index `c * n + i`.
fn interleave(u: &SpeciesFields) -> Vec<f64> {
    let n = u.n();
    let cells = u.grid().num_cells();
    let mut out = vec![0.0; n * cells];
    for (i, d) in u.data().iter().enumerate() {
        for (c, &v) in d.iter().enumerate() {
            out[c * n + i] = v;
        }
    }
    out
}

fn deinterleave(grid: Grid, n: usize, flat: &[f64]) -> SpeciesFields {
    let cells = grid.num_cells();
    let data = (0..n).map(|i| (0..cells).map(|c| flat[c * n + i]).collect()).collect();
    SpeciesFields::from_parts_unchecked(grid, data)
}

/// Scratch state for the implicit solve of one substep.
struct ImplicitSystem<'a> {
    grid: Grid,
    params: &'a ModelParams,
    n: usize,
    dt: f64,
    u_old: &'a [f64],
    source: Option<&'a [f64]>,
    flux: Vec<f64>,
    jac: Vec<f64>,
}

impl<'a> ImplicitSystem<'a> {
    fn new(grid: Grid, params: &'a ModelParams, dt: f64, u_old: &'a [f64], source: Option<&'a [f64]>) -> Self {
        let n = params.n;
        let cells = grid.num_cells();
        ImplicitSystem {
            grid,
            params,
            n,
            dt,
            u_old,
            source,
            flux: vec![0.0; n * cells],
            jac: vec![0.0; n * n * cells],
        }
    }

    /// `R(u) = u - u_old - dt (Δ_h F(u) + s)`; returns the weighted L2 norm.
    fn residual(&mut self, u: &[f64], out: &mut [f64]) -> f64 {
        let n = self.n;
        let cells = self.grid.num_cells();
        for c in 0..cells {
            flux_point(&u[c * n..(c + 1) * n], self.params, &mut self.flux[c * n..(c + 1) * n]);
        }
        let scale = self.dt / (self.grid.h() * self.grid.h());
        let mut sq = 0.0;
        for c in 0..cells {
            for i in 0..n {
                let fc = self.flux[c * n + i];
                let mut lap = 0.0;
                for nb in self.grid.neighbours(c) {
                    lap += self.flux[nb * n + i] - fc;
                }
                let r = c * n + i;
                let src = self.source.map_or(0.0, |s| s[r]);
                let v = u[r] - self.u_old[r] - (scale * lap + self.dt * src);
                out[r] = v;
                sq += v * v;
            }
        }
        (sq * self.grid.cell_volume()).sqrt()
    }

    /// `∂R/∂u = I - dt Δ_h A(u)` in row-compressed form.
    fn jacobian(&mut self, u: &[f64]) -> SparseRows {
        let n = self.n;
        let cells = self.grid.num_cells();
        let nn = n * n;
        for c in 0..cells {
            flux_jacobian_point(&u[c * n..(c + 1) * n], self.params, &mut self.jac[c * nn..(c + 1) * nn]);
        }
        let scale = self.dt / (self.grid.h() * self.grid.h());
        let mut m = SparseRows::with_capacity(n * cells, n * cells * 5 * n);
        let mut nbs = [0usize; 4];
        for c in 0..cells {
            let mut count = 0;
            for nb in self.grid.neighbours(c) {
                nbs[count] = nb;
                count += 1;
            }
            let nbs = &mut nbs[..count];
            nbs.sort_unstable();
            for i in 0..n {
                let mut own_done = false;
                for &nb in nbs.iter() {
                    if nb > c && !own_done {
                        self.push_own(&mut m, c, i, count, scale);
                        own_done = true;
                    }
                    for j in 0..n {
                        let v = self.jac[nb * nn + i * n + j];
                        if v != 0.0 {
                            m.push(nb * n + j, -scale * v);
                        }
                    }
                }
                if !own_done {
                    self.push_own(&mut m, c, i, count, scale);
                }
                m.finish_row();
            }
        }
        m
    }

    fn push_own(&self, m: &mut SparseRows, c: usize, i: usize, count: usize, scale: f64) {
        let n = self.n;
        let nn = n * n;
        for j in 0..n {
            let v = scale * count as f64 * self.jac[c * nn + i * n + j] + if i == j { 1.0 } else { 0.0 };
            m.push(c * n + j, v);
        }
    }
}

/// Extra Newton sweeps after reaching the tolerance, so the mass defect of
/// the converged state sits at round-off rather than at `newton_tol`.
const POLISH_SWEEPS: usize = 3;

/// One Newton solve at fixed `dt`. On failure returns the last residual.
fn newton_solve(
    grid: Grid,
    params: &ModelParams,
    cfg: &StepConfig,
    dt: f64,
    u_old: &[f64],
    source: Option<&[f64]>,
) -> std::result::Result<Vec<f64>, f64> {
    let dim = u_old.len();
    let mut sys = ImplicitSystem::new(grid, params, dt, u_old, source);
    let mut u: Vec<f64> = u_old.iter().map(|&v| v.max(cfg.positivity_floor)).collect();
    let mut res = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut trial_res = vec![0.0; dim];
    let mut rnorm = sys.residual(&u, &mut res);
    if !rnorm.is_finite() {
        return Err(rnorm);
    }
    let mut polish = 0;
    let mut iter = 0;
    loop {
        if rnorm <= cfg.newton_tol {
            if polish == POLISH_SWEEPS || rnorm == 0.0 {
                break;
            }
            polish += 1;
        } else if iter == cfg.newton_max_iter {
            return Err(rnorm);
        }
        iter += 1;

        let jac = sys.jacobian(&u);
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        let du = if grid.dims() == 1 {
            solve_banded(&jac, &rhs)
        } else {
            let lin_tol = 0.01 * cfg.newton_tol;
            solve_bicgstab(&jac, &rhs, lin_tol, grid.cell_volume().sqrt(), 20 * dim)
                .or_else(|| solve_banded(&jac, &rhs))
        };
        let Some(du) = du else {
            return Err(rnorm);
        };

        // Newton step in w = π log u is u <- u exp(du / u); damp until the
        // residual decreases.
        let mut theta = 1.0;
        let mut accepted = false;
        let tries = if rnorm <= cfg.newton_tol { 1 } else { 30 };
        for _ in 0..tries {
            for k in 0..dim {
                trial[k] = u[k] * (theta * du[k] / u[k]).exp();
            }
            let tn = sys.residual(&trial, &mut trial_res);
            if tn.is_finite() && tn <= (1.0 - 1e-4 * theta) * rnorm {
                std::mem::swap(&mut u, &mut trial);
                std::mem::swap(&mut res, &mut trial_res);
                rnorm = tn;
                accepted = true;
                break;
            }
            theta *= 0.5;
        }
        if !accepted {
            if rnorm <= cfg.newton_tol {
                break;
            }
            return Err(rnorm);
        }
    }
    for v in u.iter_mut() {
        if *v < cfg.positivity_floor {
            *v = cfg.positivity_floor;
        }
    }
    Ok(u)
}

fn solve_with_halving(
    grid: Grid,
    params: &ModelParams,
    cfg: &StepConfig,
    dt: f64,
    u_old: &[f64],
    source: Option<&[f64]>,
    depth: u32,
) -> std::result::Result<Vec<f64>, f64> {
    match newton_solve(grid, params, cfg, dt, u_old, source) {
        Ok(u) => Ok(u),
        Err(residual) if depth >= MAX_DT_HALVINGS => Err(residual),
        Err(_) => {
            log::debug!("Newton failed at dt = {dt:e}, halving");
            let half = solve_with_halving(grid, params, cfg, 0.5 * dt, u_old, source, depth + 1)?;
            solve_with_halving(grid, params, cfg, 0.5 * dt, &half, source, depth + 1)
        }
    }
}

/// Backward-Euler substep `(u⁺ - u)/dt = Δ_h F(u⁺) + source`.
///
/// Newton runs on the entropy variables, so `u⁺ > 0` componentwise. The
/// Newton residual (discrete `L^2`) is driven below `cfg.newton_tol`; on
/// failure `dt` is halved up to [`MAX_DT_HALVINGS`] times.
pub fn deterministic_substep(
    u: &SpeciesFields,
    source: Option<&SpeciesFields>,
    dt: f64,
    params: &ModelParams,
    cfg: &StepConfig,
) -> std::result::Result<SpeciesFields, StepError> {
    debug_assert_eq!(u.n(), params.n);
    let u_old = interleave(u);
    let src = source.map(interleave);
    let out = solve_with_halving(*u.grid(), params, cfg, dt, &u_old, src.as_deref(), 0)
        .map_err(|residual| StepError::NewtonFailure { residual })?;
    Ok(deinterleave(*u.grid(), params.n, &out))
}

fn check_guard(state: &SpeciesFields, cfg: &StepConfig) -> std::result::Result<(), StepError> {
    let norm = state.l2_norm();
    if !norm.is_finite() || norm > cfg.blowup_r {
        return Err(StepError::StoppedAtGuard { norm });
    }
    Ok(())
}

/// Euler–Maruyama kick `u* = u + σ(u) ΔW` per cell, negatives clamped to
/// zero, followed by one [`deterministic_substep`] of size `dt`.
pub fn em_ito_step(
    u: &SpeciesFields,
    dw: &[f64],
    dt: f64,
    params: &ModelParams,
    cfg: &StepConfig,
) -> std::result::Result<StepOutput, StepError> {
    let n = params.n;
    let mut kicked = u.clone();
    let mut clamp_events = 0;
    if params.sigma_scale != 0.0 || matches!(params.noise, NoiseLaw::Custom(_)) {
        let cells = u.grid().num_cells();
        match &params.noise {
            NoiseLaw::Diagonal => {
                for i in 0..n {
                    for v in kicked.species_mut(i) {
                        *v += sigma_diag(*v, params) * dw[i];
                    }
                }
            }
            NoiseLaw::Custom(_) => {
                for c in 0..cells {
                    let point = u.point(c);
                    let sigma = sigma_eval(&point, params);
                    for i in 0..n {
                        let kick: f64 = (0..n).map(|j| sigma[(i, j)] * dw[j]).sum();
                        kicked.species_mut(i)[c] = point[i] + kick;
                    }
                }
            }
        }
        for i in 0..n {
            for v in kicked.species_mut(i) {
                if *v < 0.0 {
                    *v = 0.0;
                    clamp_events += 1;
                }
            }
        }
        if !kicked.is_finite() {
            return Err(StepError::StoppedAtGuard { norm: f64::INFINITY });
        }
    }
    let state = deterministic_substep(&kicked, None, dt, params, cfg)?;
    check_guard(&state, cfg)?;
    Ok(StepOutput { state, clamp_events })
}

/// Forcing `σ(v) slope - ½ Σ (∂σ/∂u) σ` (the drift term only when enabled).
fn wz_forcing(v: &SpeciesFields, slope: &[f64], params: &ModelParams, correction: bool) -> SpeciesFields {
    let n = params.n;
    let mut out = v.clone();
    match &params.noise {
        NoiseLaw::Diagonal => {
            for i in 0..n {
                for x in out.species_mut(i) {
                    let s = sigma_diag(*x, params);
                    let drift = if correction { 0.5 * sigma_diag_derivative(*x, params) * s } else { 0.0 };
                    *x = s * slope[i] - drift;
                }
            }
        }
        NoiseLaw::Custom(_) => {
            for c in 0..v.grid().num_cells() {
                let point = v.point(c);
                let sigma = sigma_eval(&point, params);
                let corr = if correction { stratonovich_correction(&point, params) } else { vec![0.0; n] };
                for i in 0..n {
                    let kick: f64 = (0..n).map(|j| sigma[(i, j)] * slope[j]).sum();
                    out.species_mut(i)[c] = kick - corr[i];
                }
            }
        }
    }
    out
}

/// Integrates the Wong–Zakai random ODE over noise interval `k` with
/// `cfg.substeps_per_noise_interval` implicit-diffusion substeps; the
/// forcing is explicit (see [`WzForcing`]).
pub fn wong_zakai_interval(
    u: &SpeciesFields,
    path: &WienerPath,
    k: usize,
    params: &ModelParams,
    cfg: &StepConfig,
) -> std::result::Result<StepOutput, StepError> {
    let slope = path.wz_slope(k).map_err(|_| StepError::NewtonFailure { residual: f64::NAN })?;
    let substeps = cfg.substeps_per_noise_interval;
    let dt = path.eta() / substeps as f64;
    let mut state = u.clone();
    for _ in 0..substeps {
        let f0 = wz_forcing(&state, &slope, params, cfg.stratonovich_correction);
        let predictor = deterministic_substep(&state, Some(&f0), dt, params, cfg)?;
        state = match cfg.wz_forcing {
            WzForcing::Euler => predictor,
            WzForcing::Heun => {
                let mut avg = wz_forcing(&predictor, &slope, params, cfg.stratonovich_correction);
                for i in 0..params.n {
                    for (a, b) in avg.species_mut(i).iter_mut().zip(f0.species(i)) {
                        *a = 0.5 * (*a + b);
                    }
                }
                deterministic_substep(&state, Some(&avg), dt, params, cfg)?
            }
        };
        check_guard(&state, cfg)?;
    }
    Ok(StepOutput { state, clamp_events: 0 })
}

/// Runs the configured scheme over `[0, T]` (with `T = path.t_final()`),
/// keeping every `sample_stride`-th state plus the terminal one.
///
/// `EntropyImplicit` ignores the path's increments and uses
/// `ceil(T / cfg.dt)` equal steps; the noise schemes take one step per noise
/// interval.
pub fn simulate_path(
    u0: &SpeciesFields,
    path: &WienerPath,
    params: &ModelParams,
    cfg: &StepConfig,
    sample_stride: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    if u0.n() != params.n {
        return Err(SktError::domain(format!("state has {} species, model has {}", u0.n(), params.n)));
    }
    if cfg.scheme != Scheme::EntropyImplicit && path.n() != params.n {
        return Err(SktError::domain(format!("Wiener path has {} dimensions, model has {}", path.n(), params.n)));
    }
    if u0.min_value() < 0.0 {
        return Err(SktError::rejected("(A2)", "initial densities must be nonnegative"));
    }
    let stride = sample_stride.max(1);
    let t_final = path.t_final();
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![u0.clone()],
        clamp_counts: vec![0],
        terminal_status: TerminalStatus::Completed,
    };
    if t_final == 0.0 {
        return Ok(traj);
    }

    let (steps, dt) = match cfg.scheme {
        Scheme::EntropyImplicit => {
            let steps = ((t_final / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
            (steps, t_final / steps as f64)
        }
        Scheme::EmIto | Scheme::WongZakai => (path.steps(), path.eta()),
    };
    let mut state = u0.clone();
    let mut clamps = 0;
    for k in 0..steps {
        let t_next = if k + 1 == steps { t_final } else { (k + 1) as f64 * dt };
        let outcome = match cfg.scheme {
            Scheme::EntropyImplicit => deterministic_substep(&state, None, dt, params, cfg)
                .and_then(|s| check_guard(&s, cfg).map(|_| StepOutput { state: s, clamp_events: 0 })),
            Scheme::EmIto => em_ito_step(&state, path.increment(k), dt, params, cfg),
            Scheme::WongZakai => wong_zakai_interval(&state, path, k, params, cfg),
        };
        match outcome {
            Ok(out) => {
                state = out.state;
                clamps += out.clamp_events;
            }
            Err(StepError::StoppedAtGuard { .. }) => {
                traj.terminal_status = TerminalStatus::StoppedAtGuard { t: t_next };
                return Ok(traj);
            }
            Err(StepError::NewtonFailure { .. }) => {
                traj.terminal_status = TerminalStatus::NewtonFailure { t: t_next };
                return Ok(traj);
            }
        }
        if (k + 1) % stride == 0 || k + 1 == steps {
            traj.times.push(t_next);
            traj.states.push(state.clone());
            traj.clamp_counts.push(clamps);
        }
    }
    Ok(traj)
}
