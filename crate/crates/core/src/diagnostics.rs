//! Functionals appearing in the entropy and moment estimates.
//!
//! All spatial derivatives are face differences, and square-root gradients
//! are taken as differences of `sqrt(u)` (never `∇u / (2 sqrt(u))`), so the
//! production term stays bounded near vacuum.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SktError};
use crate::grid::{gradient_p_norm_pow_of, gradient_sq_norm_of, integrate_of};
use crate::integrators::Trajectory;
use crate::model::{entropy, ModelParams, SpeciesFields};

/// Snapshot of the diagnostics at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub entropy: f64,
    /// Instantaneous entropy dissipation rate.
    pub production: f64,
    pub mass: Vec<f64>,
    pub l2_norm: f64,
    pub linf: f64,
    /// `∫ |∇ sqrt(u_i)|^2` per species.
    pub sqrt_grad: Vec<f64>,
    /// `∫ |∇ sqrt(u_i u_j)|^2` for pairs `i < j` in lexicographic order.
    pub cross_sqrt_grad: Vec<f64>,
    pub clamp_events: usize,
    /// Pearson correlation of species 0 and 1 (0 for a single species).
    pub segregation: f64,
}

fn sqrt_field(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0).sqrt()).collect()
}

fn sqrt_product_field(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| (x.max(0.0) * y.max(0.0)).sqrt()).collect()
}

/// Entropy production
/// `2 Σ_i π_i (2 a_i0 |∇√u_i|² + a_ii |∇u_i|² + Σ_{j≠i} a_ij |∇√(u_i u_j)|²)`.
pub fn production(u: &SpeciesFields, params: &ModelParams) -> f64 {
    let grid = u.grid();
    let n = params.n;
    let sqrt_grads: Vec<f64> = (0..n).map(|i| gradient_sq_norm_of(grid, &sqrt_field(u.species(i)))).collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut term = 2.0 * params.a0[i] * sqrt_grads[i];
        if params.a[i][i] != 0.0 {
            term += params.a[i][i] * gradient_sq_norm_of(grid, u.species(i));
        }
        for j in 0..n {
            if j != i && params.a[i][j] != 0.0 {
                let pair = sqrt_product_field(u.species(i), u.species(j));
                term += params.a[i][j] * gradient_sq_norm_of(grid, &pair);
            }
        }
        total += params.pi[i] * term;
    }
    2.0 * total
}

/// Pearson correlation of the cell values of species `i` and `j`; 0 when
/// either field is constant.
pub fn segregation_index(u: &SpeciesFields, i: usize, j: usize) -> f64 {
    let (x, y) = (u.species(i), u.species(j));
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // relative threshold: fields equal up to round-off count as constant
    let tiny = |s: f64, mean: f64| s <= (1e-13 * mean.abs().max(1e-300)).powi(2) * m;
    if tiny(sxx, mx) || tiny(syy, my) {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Diagnostics of state `u` at time `t`.
pub fn record(u: &SpeciesFields, t: f64, params: &ModelParams, clamp_events: usize) -> DiagnosticsRecord {
    let grid = u.grid();
    let n = u.n();
    let mut cross = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            cross.push(gradient_sq_norm_of(grid, &sqrt_product_field(u.species(i), u.species(j))));
        }
    }
    DiagnosticsRecord {
        t,
        entropy: entropy(u, params).total,
        production: production(u, params),
        mass: u.masses(),
        l2_norm: u.l2_norm(),
        linf: u.max_abs(),
        sqrt_grad: (0..n).map(|i| gradient_sq_norm_of(grid, &sqrt_field(u.species(i)))).collect(),
        cross_sqrt_grad: cross,
        clamp_events,
        segregation: if n >= 2 { segregation_index(u, 0, 1) } else { 0.0 },
    }
}

/// Diagnostics for every snapshot of a trajectory.
pub fn record_trajectory(traj: &Trajectory, params: &ModelParams) -> Vec<DiagnosticsRecord> {
    traj.times
        .iter()
        .zip(&traj.states)
        .zip(&traj.clamp_counts)
        .map(|((&t, s), &c)| record(s, t, params, c))
        .collect()
}

/// Trapezoid rule over possibly non-uniform sample times.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Running trapezoid integral of `values`, starting at 0.
pub fn cumulative_trapezoid(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for (t, v) in times.windows(2).zip(values.windows(2)) {
        acc += 0.5 * (t[1] - t[0]) * (v[0] + v[1]);
        out.push(acc);
    }
    out.truncate(times.len());
    out
}

/// Space-time norms controlled by the entropy estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    /// `||u||` in `L^{ρ₁}(0,T; W^{1,ρ₁})`, all species together.
    pub lrho1_w1rho1: f64,
    /// `||∇(u_i u_j)||` in `L^{ρ₂}(Q_T)` for pairs `i < j`.
    pub lrho2_grad_pair: Vec<f64>,
    /// `||u||` in `L^{1+2/d}(Q_T)`.
    pub l1p2d: f64,
    pub rho1: f64,
    pub rho2: f64,
}

/// `ρ₁ = (d + 2) / (d + 1)`.
pub fn rho1(d: usize) -> f64 {
    (d as f64 + 2.0) / (d as f64 + 1.0)
}

/// `ρ₂ = (2d + 2) / (2d + 1)`.
pub fn rho2(d: usize) -> f64 {
    (2.0 * d as f64 + 2.0) / (2.0 * d as f64 + 1.0)
}

fn lp_pow(grid: &crate::grid::Grid, v: &[f64], p: f64) -> f64 {
    grid.cell_volume() * v.iter().map(|x| x.abs().powf(p)).sum::<f64>()
}

/// Bochner norms of a completed trajectory; time integrals use the trapezoid
/// rule over the snapshots, so dense snapshots are expected.
pub fn norm_report(traj: &Trajectory, params: &ModelParams) -> Result<NormReport> {
    if !traj.is_completed() {
        return Err(SktError::NormUnavailable(format!("trajectory ended with {:?}", traj.terminal_status)));
    }
    let first = &traj.states[0];
    let grid = *first.grid();
    let d = grid.dims();
    let (r1, r2) = (rho1(d), rho2(d));
    let q = 1.0 + 2.0 / d as f64;
    let n = params.n;

    let mut w1 = Vec::with_capacity(traj.states.len());
    let mut lq = Vec::with_capacity(traj.states.len());
    let mut pairs: Vec<Vec<f64>> = vec![Vec::with_capacity(traj.states.len()); n * (n - 1) / 2];
    for s in &traj.states {
        w1.push(
            (0..n)
                .map(|i| lp_pow(&grid, s.species(i), r1) + gradient_p_norm_pow_of(&grid, s.species(i), r1))
                .sum::<f64>(),
        );
        lq.push((0..n).map(|i| lp_pow(&grid, s.species(i), q)).sum::<f64>());
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let prod: Vec<f64> = s.species(i).iter().zip(s.species(j)).map(|(a, b)| a * b).collect();
                pairs[k].push(gradient_p_norm_pow_of(&grid, &prod, r2));
                k += 1;
            }
        }
    }
    // a single snapshot (T = 0) has zero time measure
    let integrate = |v: &[f64]| trapezoid(&traj.times, v);
    Ok(NormReport {
        lrho1_w1rho1: integrate(&w1).powf(1.0 / r1),
        lrho2_grad_pair: pairs.iter().map(|p| integrate(p).powf(1.0 / r2)).collect(),
        l1p2d: integrate(&lq).powf(1.0 / q),
        rho1: r1,
        rho2: r2,
    })
}

/// Dual-cell quadrature weights for sample times `t_0 < ... < t_M`.
fn dual_weights(times: &[f64]) -> Vec<f64> {
    let m = times.len();
    (0..m)
        .map(|k| {
            let lo = if k == 0 { times[0] } else { times[k - 1] };
            let hi = if k + 1 == m { times[m - 1] } else { times[k + 1] };
            let own = times[k];
            0.5 * ((own - lo) + (hi - own))
        })
        .collect()
}

fn seminorm_with(times: &[f64], alpha: f64, dist_sq: impl Fn(usize, usize) -> f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SktError::domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if times.len() < 2 {
        return Err(SktError::domain("need at least two samples"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SktError::domain("sample times must be strictly increasing"));
    }
    let w = dual_weights(times);
    let expo = 1.0 + 2.0 * alpha;
    let mut acc = 0.0;
    for k in 0..times.len() {
        for l in k + 1..times.len() {
            let gap = times[l] - times[k];
            acc += w[k] * w[l] * dist_sq(k, l) / gap.powf(expo);
        }
    }
    // the double integral is symmetric in (t, s)
    Ok(2.0 * acc)
}

/// Sobolev–Slobodeckij seminorm `∫∫ |v(t) - v(s)|^2 / |t - s|^{1+2α}` of a
/// scalar series, diagonal pairs excluded.
pub fn fractional_seminorm(times: &[f64], series: &[f64], alpha: f64) -> Result<f64> {
    if times.len() != series.len() {
        return Err(SktError::domain("times and series lengths differ"));
    }
    seminorm_with(times, alpha, |k, l| (series[k] - series[l]).powi(2))
}

/// Same seminorm for a trajectory with the discrete `L^2` distance of states.
pub fn trajectory_fractional_seminorm(traj: &Trajectory, alpha: f64) -> Result<f64> {
    let grid = *traj.states[0].grid();
    seminorm_with(&traj.times, alpha, |k, l| {
        let (a, b) = (&traj.states[k], &traj.states[l]);
        (0..a.n())
            .map(|i| {
                let diff: Vec<f64> = a.species(i).iter().zip(b.species(i)).map(|(x, y)| (x - y).powi(2)).collect();
                integrate_of(&grid, &diff)
            })
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::integrators::{simulate_path, StepConfig, TerminalStatus};
    use crate::noise::WienerPath;
    use std::f64::consts::PI;

    fn grid() -> Grid {
        Grid::unit_interval(32, 1.0).unwrap()
    }

    #[test]
    fn constant_state_has_no_production() {
        let params = ModelParams::new(vec![1.0, 1.0], vec![vec![1.0, 2.0], vec![1.0, 1.0]], None, 1.0, 0.0).unwrap();
        let u = SpeciesFields::constant(grid(), &[2.0, 3.0]);
        let r = record(&u, 0.0, &params, 0);
        assert_eq!(r.production, 0.0);
        assert_eq!(r.segregation, 0.0);
        assert_eq!(r.cross_sqrt_grad.len(), 1);
    }

    #[test]
    fn heat_production_is_fisher_information() {
        let params = ModelParams::new(vec![1.0], vec![vec![0.0]], Some(vec![0.7]), 1.0, 0.0).unwrap();
        let u = SpeciesFields::from_fn(grid(), 1, |_, x, _| 1.0 + 0.5 * (PI * x).cos());
        let r = record(&u, 0.0, &params, 0);
        assert!((r.production - 4.0 * 0.7 * r.sqrt_grad[0]).abs() < 1e-14);
    }

    #[test]
    fn segregation_extremes() {
        let g = grid();
        let same = SpeciesFields::from_fn(g, 2, |_, x, _| 1.0 + x * x);
        assert!((segregation_index(&same, 0, 1) - 1.0).abs() < 1e-12);
        let comp = SpeciesFields::from_fn(g, 2, |i, x, _| if i == 0 { 1.0 + x } else { 3.0 - (1.0 + x) });
        assert!((segregation_index(&comp, 0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_exponents() {
        assert_eq!(rho1(1), 1.5);
        assert_eq!(rho2(1), 4.0 / 3.0);
        assert_eq!(rho1(2), 4.0 / 3.0);
        assert_eq!(rho2(2), 6.0 / 5.0);
    }

    fn constant_traj(c: f64) -> Trajectory {
        let g = grid();
        let times: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        Trajectory {
            states: times.iter().map(|_| SpeciesFields::constant(g, &[c])).collect(),
            clamp_counts: vec![0; times.len()],
            times,
            terminal_status: TerminalStatus::Completed,
        }
    }

    #[test]
    fn norms_of_constants() {
        let params = ModelParams::heat(vec![1.0]).unwrap();
        let zero = norm_report(&constant_traj(0.0), &params).unwrap();
        assert_eq!(zero.lrho1_w1rho1, 0.0);
        assert_eq!(zero.l1p2d, 0.0);
        let c = norm_report(&constant_traj(2.5), &params).unwrap();
        assert!((c.lrho1_w1rho1 - 2.5).abs() < 1e-12);
        assert!((c.l1p2d - 2.5).abs() < 1e-12);
        assert!(c.lrho2_grad_pair.is_empty());
    }

    #[test]
    fn stopped_trajectories_have_no_norms() {
        let mut t = constant_traj(1.0);
        t.terminal_status = TerminalStatus::StoppedAtGuard { t: 0.5 };
        assert!(matches!(norm_report(&t, &ModelParams::heat(vec![1.0]).unwrap()), Err(SktError::NormUnavailable(_))));
    }

    #[test]
    fn seminorm_of_linear_series() {
        let times: Vec<f64> = (0..512).map(|k| k as f64 / 511.0).collect();
        let v = times.clone();
        let s = fractional_seminorm(&times, &v, 0.25).unwrap();
        assert!((s - 8.0 / 15.0).abs() < 1e-3, "{s}");
        let s4 = fractional_seminorm(&times, &v, 0.4).unwrap();
        let s2 = fractional_seminorm(&times, &v, 0.2).unwrap();
        assert!(s4 > s2);
        let flat = vec![3.0; 512];
        assert_eq!(fractional_seminorm(&times, &flat, 0.25).unwrap(), 0.0);
        assert!(fractional_seminorm(&times, &v, 1.0).is_err());
        assert!(fractional_seminorm(&times, &v, 0.0).is_err());
        assert!(fractional_seminorm(&times[..1], &v[..1], 0.5).is_err());
    }

    #[test]
    fn seminorm_is_quadratic() {
        let times: Vec<f64> = (0..64).map(|k| k as f64 / 63.0).collect();
        let v: Vec<f64> = times.iter().map(|t| (5.0 * t).sin()).collect();
        let cv: Vec<f64> = v.iter().map(|x| -2.5 * x).collect();
        let a = fractional_seminorm(&times, &v, 0.3).unwrap();
        let b = fractional_seminorm(&times, &cv, 0.3).unwrap();
        assert!((b - 6.25 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn trajectory_seminorm_matches_scalar_for_homogeneous_states() {
        let params = ModelParams::heat(vec![1.0]).unwrap();
        let g = Grid::unit_interval(4, 1.0).unwrap();
        let path = WienerPath::zero(1, 1.0, 16).unwrap();
        let mut traj = simulate_path(&SpeciesFields::constant(g, &[1.0]), &path, &params, &StepConfig::default(), 100).unwrap();
        // overwrite with a linear-in-time homogeneous state
        traj.times = (0..32).map(|k| k as f64 / 31.0).collect();
        traj.states = traj.times.iter().map(|&t| SpeciesFields::constant(g, &[t])).collect();
        traj.clamp_counts = vec![0; 32];
        let a = trajectory_fractional_seminorm(&traj, 0.25).unwrap();
        let b = fractional_seminorm(&traj.times, &traj.times.clone(), 0.25).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn trapezoids() {
        let t = [0.0, 0.5, 1.5];
        let v = [1.0, 1.0, 3.0];
        assert!((trapezoid(&t, &v) - 2.5).abs() < 1e-15);
        assert_eq!(cumulative_trapezoid(&t, &v), vec![0.0, 0.5, 2.5]);
    }
}
