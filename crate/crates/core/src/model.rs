//! SKT coefficient structure, entropy machinery and the noise law.
//!
//! The n-species system reads
//!
//! ```text
//! du_i = Δ( a_i0 u_i + Σ_j a_ij u_i u_j ) dt + Σ_j σ_ij(u) dW_j
//! ```
//!
//! with a diffusion matrix `A_ij(u) = δ_ij (a_i0 + Σ_k a_ik u_k) + a_ij u_i`
//! that is in general neither symmetric nor positive semidefinite. The
//! Boltzmann-type entropy `h(u) = Σ π_i (u_i (log u_i - 1) + 1)` with a
//! reversible measure `π` (`π_i a_ij = π_j a_ji`) restores the structure.
//! Everything here is pointwise algebra; spatial discretisation lives in
//! [`crate::grid`].

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SktError};
use crate::grid::Grid;

/// Relative tolerance for the detailed-balance invariant on [`ModelParams`].
pub const DETAILED_BALANCE_TOL: f64 = 1e-12;
/// Relative tolerance of the Kolmogorov cycle check in [`detailed_balance_solve`].
pub const CYCLE_TOL: f64 = 1e-10;

/// Which of the two existence regimes a parameter set is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `a_ii > 0` for all species, `0 < γ ≤ 1`.
    SelfDiffusion,
    /// `a_ii = 0` and `a_i0 > 0` for all species, `0 < γ ≤ 2/d`.
    NoSelfDiffusion,
}

/// User-supplied full-matrix noise law `u ↦ σ(u)`.
pub type SigmaFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// The multiplicative noise coefficient.
#[derive(Clone, Default)]
pub enum NoiseLaw {
    /// `σ_ij(u) = δ_ij s u_i / (1 + u_i^(1-γ))`.
    #[default]
    Diagonal,
    /// Arbitrary law; derivatives are taken by finite differences.
    Custom(Arc<SigmaFn>),
}

impl fmt::Debug for NoiseLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseLaw::Diagonal => f.write_str("Diagonal"),
            NoiseLaw::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Coefficients of the SKT system and its noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    /// Diffusion coefficients `a_i0`.
    pub a0: Vec<f64>,
    /// Self (`a_ii`) and cross (`a_ij`) coefficients, row-major `n x n`.
    pub a: Vec<Vec<f64>>,
    /// Reversible measure.
    pub pi: Vec<f64>,
    /// Noise exponent.
    pub gamma: f64,
    /// Overall noise amplitude.
    pub sigma_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(skip)]
    pub noise: NoiseLaw,
}

impl ModelParams {
    /// Builds and validates a parameter set. When `pi` is `None` it is solved
    /// for with [`detailed_balance_solve`].
    pub fn new(
        a0: Vec<f64>,
        a: Vec<Vec<f64>>,
        pi: Option<Vec<f64>>,
        gamma: f64,
        sigma_scale: f64,
    ) -> Result<Self> {
        let pi = match pi {
            Some(pi) => pi,
            None => detailed_balance_solve(&a)?.pi,
        };
        let params = ModelParams {
            n: a0.len(),
            a0,
            a,
            pi,
            gamma,
            sigma_scale,
            regime: None,
            noise: NoiseLaw::Diagonal,
        };
        params.validate()?;
        Ok(params)
    }

    /// Pure heat equation `du_i = a_i0 Δu_i dt` for each species, no noise.
    pub fn heat(a0: Vec<f64>) -> Result<Self> {
        let n = a0.len();
        Self::new(a0, vec![vec![0.0; n]; n], Some(vec![1.0; n]), 1.0, 0.0)
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = Some(regime);
        self
    }

    pub fn with_noise(mut self, law: NoiseLaw) -> Self {
        self.noise = law;
        self
    }

    pub fn with_sigma_scale(mut self, sigma_scale: f64) -> Self {
        self.sigma_scale = sigma_scale;
        self
    }

    /// Checks the type invariants: shapes, signs and detailed balance.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(SktError::domain("need at least one species"));
        }
        if self.a0.len() != n || self.pi.len() != n || self.a.len() != n || self.a.iter().any(|r| r.len() != n) {
            return Err(SktError::domain(format!("coefficient shapes inconsistent with n = {n}")));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.a0.iter().copied().all(finite_nonneg) || !self.a.iter().flatten().copied().all(finite_nonneg) {
            return Err(SktError::rejected("(A3)", "coefficients a_ij must be nonnegative"));
        }
        if !self.pi.iter().all(|&p| p.is_finite() && p > 0.0) {
            return Err(SktError::rejected("(A3)", "reversible measure must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(SktError::rejected("(A4)", format!("noise exponent must be positive, got {}", self.gamma)));
        }
        if !finite_nonneg(self.sigma_scale) {
            return Err(SktError::rejected("(A4)", "noise amplitude must be nonnegative"));
        }
        for i in 0..n {
            for j in 0..n {
                let lhs = self.pi[i] * self.a[i][j];
                let rhs = self.pi[j] * self.a[j][i];
                if (lhs - rhs).abs() > DETAILED_BALANCE_TOL * lhs.max(1.0) {
                    return Err(SktError::rejected(
                        "(A3)",
                        format!("detailed balance violated for ({i}, {j}): {lhs} != {rhs}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Regime inferred from the diagonal: `Some` only when it is unambiguous.
    pub fn inferred_regime(&self) -> Option<Regime> {
        if (0..self.n).all(|i| self.a[i][i] > 0.0) {
            Some(Regime::SelfDiffusion)
        } else if (0..self.n).all(|i| self.a[i][i] == 0.0 && self.a0[i] > 0.0) {
            Some(Regime::NoSelfDiffusion)
        } else {
            None
        }
    }

    /// Checks the regime flag against the coefficients and the noise exponent
    /// bound for spatial dimension `d`.
    pub fn check_regime(&self, d: usize) -> Result<()> {
        let Some(regime) = self.regime else {
            return Ok(());
        };
        match regime {
            Regime::SelfDiffusion => {
                if let Some(i) = (0..self.n).find(|&i| self.a[i][i] <= 0.0) {
                    return Err(SktError::rejected("(A3)", format!("self-diffusion regime needs a_{i}{i} > 0")));
                }
                if self.gamma > 1.0 {
                    return Err(SktError::rejected(
                        "(A4)",
                        format!("with self-diffusion gamma must be <= 1, got {}", self.gamma),
                    ));
                }
            }
            Regime::NoSelfDiffusion => {
                if let Some(i) = (0..self.n).find(|&i| self.a[i][i] != 0.0 || self.a0[i] <= 0.0) {
                    return Err(SktError::rejected(
                        "(A3)",
                        format!("regime without self-diffusion needs a_{i}{i} = 0 and a_{i}0 > 0"),
                    ));
                }
                let bound = 2.0 / d as f64;
                if self.gamma > bound {
                    return Err(SktError::rejected(
                        "(A4)",
                        format!("without self-diffusion gamma must be <= 2/d = {bound}, got {}", self.gamma),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-species cell densities on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesFields {
    grid: Grid,
    data: Vec<Vec<f64>>,
}

impl SpeciesFields {
    pub fn new(grid: Grid, data: Vec<Vec<f64>>) -> Result<Self> {
        if data.is_empty() {
            return Err(SktError::domain("need at least one species"));
        }
        for (i, d) in data.iter().enumerate() {
            if d.len() != grid.num_cells() {
                return Err(SktError::domain(format!(
                    "species {i} has {} values, grid has {} cells",
                    d.len(),
                    grid.num_cells()
                )));
            }
            if let Some(v) = d.iter().find(|v| !v.is_finite()) {
                return Err(SktError::domain(format!("species {i} has non-finite value {v}")));
            }
        }
        Ok(SpeciesFields { grid, data })
    }

    /// Spatially constant state.
    pub fn constant(grid: Grid, values: &[f64]) -> Self {
        let data = values.iter().map(|&v| vec![v; grid.num_cells()]).collect();
        SpeciesFields { grid, data }
    }

    /// Samples `f(species, x, y)` at cell centres.
    pub fn from_fn(grid: Grid, n: usize, f: impl Fn(usize, f64, f64) -> f64) -> Self {
        let data = (0..n)
            .map(|i| {
                (0..grid.num_cells())
                    .map(|c| {
                        let [x, y] = grid.center(c);
                        f(i, x, y)
                    })
                    .collect()
            })
            .collect();
        SpeciesFields { grid, data }
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, data: Vec<Vec<f64>>) -> Self {
        SpeciesFields { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub fn species_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i]
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    /// The `n` species values at cell `c`.
    pub fn point(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|d| d[c]).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// Discrete `L^2` norm of the whole state, `(Σ_i ∫ u_i^2)^(1/2)`.
    pub fn l2_norm(&self) -> f64 {
        let sq: f64 = self.data.iter().flatten().map(|v| v * v).sum();
        (sq * self.grid.cell_volume()).sqrt()
    }

    /// Per-species integrals.
    pub fn masses(&self) -> Vec<f64> {
        self.data.iter().map(|d| crate::grid::integrate_of(&self.grid, d)).collect()
    }

    /// Largest spread `max - min` over cells of any species.
    pub fn spatial_spread(&self) -> f64 {
        self.data
            .iter()
            .map(|d| {
                let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// Value of the entropy functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyValue {
    pub total: f64,
    pub per_species: Vec<f64>,
}

/// `A(u)`, which is also the Jacobian `∂F/∂u` of the flux potential.
pub fn diffusion_matrix(u_point: &[f64], params: &ModelParams) -> Result<DMatrix<f64>> {
    check_point(u_point, params)?;
    if let Some(v) = u_point.iter().find(|v| **v < 0.0) {
        return Err(SktError::domain(format!("negative density {v}")));
    }
    let mut out = vec![0.0; params.n * params.n];
    flux_jacobian_point(u_point, params, &mut out);
    Ok(DMatrix::from_row_slice(params.n, params.n, &out))
}

/// Row-major `A(u)` into `out` (length `n^2`), no validation.
#[inline]
pub(crate) fn flux_jacobian_point(u: &[f64], params: &ModelParams, out: &mut [f64]) {
    let n = params.n;
    for i in 0..n {
        let row = &params.a[i];
        let diag = params.a0[i] + row.iter().zip(u).map(|(a, v)| a * v).sum::<f64>();
        for j in 0..n {
            out[i * n + j] = row[j] * u[i] + if i == j { diag } else { 0.0 };
        }
    }
}

/// `F_i(u) = a_i0 u_i + Σ_j a_ij u_i u_j` at one point, written into `out`.
#[inline]
pub(crate) fn flux_point(u: &[f64], params: &ModelParams, out: &mut [f64]) {
    for i in 0..params.n {
        let cross: f64 = params.a[i].iter().zip(u).map(|(a, v)| a * v).sum();
        out[i] = u[i] * (params.a0[i] + cross);
    }
}

/// The potential whose Laplacian drives the dynamics, evaluated cellwise.
pub fn flux(u: &SpeciesFields, params: &ModelParams) -> Result<SpeciesFields> {
    if u.n() != params.n {
        return Err(SktError::domain(format!("state has {} species, model has {}", u.n(), params.n)));
    }
    let cells = u.grid.num_cells();
    let mut data = vec![vec![0.0; cells]; params.n];
    let mut up = vec![0.0; params.n];
    let mut fp = vec![0.0; params.n];
    for c in 0..cells {
        for i in 0..params.n {
            up[i] = u.data[i][c];
        }
        flux_point(&up, params, &mut fp);
        for i in 0..params.n {
            data[i][c] = fp[i];
        }
    }
    Ok(SpeciesFields { grid: u.grid, data })
}

/// `u (log u - 1) + 1` with the limit value 1 at `u = 0`.
#[inline]
pub fn entropy_density_scalar(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        u * (u.ln() - 1.0) + 1.0
    }
}

/// `∫ h(u) dx` with `h(u) = Σ π_i (u_i (log u_i - 1) + 1)`.
pub fn entropy(u: &SpeciesFields, params: &ModelParams) -> EntropyValue {
    let vol = u.grid.cell_volume();
    let per_species: Vec<f64> = u
        .data
        .iter()
        .zip(&params.pi)
        .map(|(d, &p)| p * vol * d.iter().map(|&v| entropy_density_scalar(v)).sum::<f64>())
        .collect();
    EntropyValue { total: per_species.iter().sum(), per_species }
}

/// Smooth positive part `g_δ(z) = (z + sqrt(z^2 + δ^2)) / 2`.
#[inline]
pub fn smooth_positive_part(z: f64, delta: f64) -> f64 {
    0.5 * (z + z.hypot(delta))
}

/// Entropy with the regularised density `h((g_δ(u) + δ))`, which is smooth on
/// all of `R^n` and tends to [`entropy`] as `δ → 0` for nonnegative `u`.
pub fn regularized_entropy(u: &SpeciesFields, params: &ModelParams, delta: f64) -> Result<EntropyValue> {
    if !(delta > 0.0) {
        return Err(SktError::domain(format!("regularisation delta must be positive, got {delta}")));
    }
    let vol = u.grid.cell_volume();
    let per_species: Vec<f64> = u
        .data
        .iter()
        .zip(&params.pi)
        .map(|(d, &p)| {
            p * vol
                * d.iter()
                    .map(|&v| entropy_density_scalar(smooth_positive_part(v, delta) + delta))
                    .sum::<f64>()
        })
        .collect();
    Ok(EntropyValue { total: per_species.iter().sum(), per_species })
}

/// Entropy variables `w_i = π_i log u_i`.
pub fn to_entropy_vars(u_point: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    check_point(u_point, params)?;
    u_point
        .iter()
        .zip(&params.pi)
        .map(|(&u, &p)| {
            if u > 0.0 {
                Ok(p * u.ln())
            } else {
                Err(SktError::domain(format!("entropy variables need positive densities, got {u}")))
            }
        })
        .collect()
}

/// Inverse of [`to_entropy_vars`]: `u_i = exp(w_i / π_i)`.
pub fn from_entropy_vars(w: &[f64], params: &ModelParams) -> Vec<f64> {
    w.iter().zip(&params.pi).map(|(&w, &p)| (w / p).exp()).collect()
}

/// Built-in diagonal law `s u / (1 + u^(1-γ))`, zero for `u <= 0`.
#[inline]
pub(crate) fn sigma_diag(u: f64, params: &ModelParams) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    params.sigma_scale * u / (1.0 + u.powf(1.0 - params.gamma))
}

/// Derivative of [`sigma_diag`], `s (1 + γ u^(1-γ)) / (1 + u^(1-γ))^2`.
#[inline]
pub(crate) fn sigma_diag_derivative(u: f64, params: &ModelParams) -> f64 {
    let u = u.max(0.0);
    let q = u.powf(1.0 - params.gamma);
    params.sigma_scale * (1.0 + params.gamma * q) / ((1.0 + q) * (1.0 + q))
}

/// `σ(u)` as an `n x n` matrix.
pub fn sigma_eval(u_point: &[f64], params: &ModelParams) -> DMatrix<f64> {
    match &params.noise {
        NoiseLaw::Diagonal => {
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                params.n,
                u_point.iter().map(|&u| sigma_diag(u, params)),
            ))
        }
        NoiseLaw::Custom(f) => f(u_point),
    }
}

/// Finite-difference Jacobian of the noise law: entry `k` is `∂σ/∂u_k`.
///
/// Central differences with step `1e-6 max(1, |u_k|)`; forward differences
/// where the backward node would leave `[0, ∞)`.
pub fn sigma_jacobian_fd(u_point: &[f64], params: &ModelParams) -> Vec<DMatrix<f64>> {
    let mut probe = u_point.to_vec();
    (0..u_point.len())
        .map(|k| {
            let step = 1e-6 * u_point[k].abs().max(1.0);
            let base = u_point[k];
            let lo = if base - step >= 0.0 { base - step } else { base };
            let hi = base + step;
            probe[k] = hi;
            let plus = sigma_eval(&probe, params);
            probe[k] = lo;
            let minus = sigma_eval(&probe, params);
            probe[k] = base;
            (plus - minus) / (hi - lo)
        })
        .collect()
}

/// Analytic Jacobian for the built-in law, finite differences otherwise.
pub fn sigma_jacobian(u_point: &[f64], params: &ModelParams) -> Vec<DMatrix<f64>> {
    match params.noise {
        NoiseLaw::Diagonal => (0..params.n)
            .map(|k| {
                let mut m = DMatrix::zeros(params.n, params.n);
                if u_point[k] > 0.0 {
                    m[(k, k)] = sigma_diag_derivative(u_point[k], params);
                }
                m
            })
            .collect(),
        NoiseLaw::Custom(_) => sigma_jacobian_fd(u_point, params),
    }
}

/// Itô–Stratonovich drift `c_i = ½ Σ_{j,k} (∂σ_ij/∂u_k) σ_kj`.
pub fn stratonovich_correction(u_point: &[f64], params: &ModelParams) -> Vec<f64> {
    match params.noise {
        NoiseLaw::Diagonal => u_point
            .iter()
            .map(|&u| 0.5 * sigma_diag_derivative(u, params) * sigma_diag(u, params))
            .collect(),
        NoiseLaw::Custom(_) => {
            let sigma = sigma_eval(u_point, params);
            let jac = sigma_jacobian(u_point, params);
            let n = params.n;
            (0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..n {
                        for (k, dk) in jac.iter().enumerate() {
                            acc += dk[(i, j)] * sigma[(k, j)];
                        }
                    }
                    0.5 * acc
                })
                .collect()
        }
    }
}

/// Reversible measure returned by [`detailed_balance_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetailedBalance {
    /// Positive weights summing to one.
    pub pi: Vec<f64>,
    /// Set when the coupling graph has several components; each component
    /// then receives an equal share of the total mass.
    pub disconnected: bool,
}

/// Solves `π_i a_ij = π_j a_ji` by propagating ratios along a BFS spanning
/// tree of the coupling graph and checking every non-tree edge.
pub fn detailed_balance_solve(a: &[Vec<f64>]) -> Result<DetailedBalance> {
    let n = a.len();
    if n == 0 || a.iter().any(|r| r.len() != n) {
        return Err(SktError::domain("coefficient matrix must be square and nonempty"));
    }
    if a.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SktError::domain("coefficients must be finite and nonnegative"));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && a[i][j] > 0.0 && a[j][i] == 0.0 {
                return Err(SktError::Infeasible {
                    reason: format!("a_{i}{j} > 0 but a_{j}{i} = 0"),
                    cycle: None,
                });
            }
        }
    }
    let edge = |i: usize, j: usize| i != j && a[i][j] > 0.0;

    let mut pi = vec![0.0; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut component = vec![usize::MAX; n];
    let mut components = Vec::new();
    for root in 0..n {
        if component[root] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![root];
        component[root] = id;
        pi[root] = 1.0;
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if edge(i, j) && component[j] == usize::MAX {
                    component[j] = id;
                    parent[j] = Some(i);
                    pi[j] = pi[i] * a[i][j] / a[j][i];
                    members.push(j);
                    queue.push_back(j);
                }
            }
        }
        components.push(members);
    }

    for i in 0..n {
        for j in (i + 1)..n {
            if !edge(i, j) || parent[j] == Some(i) || parent[i] == Some(j) {
                continue;
            }
            let lhs = pi[i] * a[i][j];
            let rhs = pi[j] * a[j][i];
            if (lhs - rhs).abs() > CYCLE_TOL * lhs.max(rhs) {
                return Err(SktError::Infeasible {
                    reason: format!("Kolmogorov cycle condition fails on edge ({i}, {j}): {lhs} != {rhs}"),
                    cycle: Some(tree_cycle(&parent, i, j)),
                });
            }
        }
    }

    let share = 1.0 / components.len() as f64;
    for members in &components {
        let total: f64 = members.iter().map(|&k| pi[k]).sum();
        for &k in members {
            pi[k] *= share / total;
        }
    }
    Ok(DetailedBalance { pi, disconnected: components.len() > 1 })
}

/// Closed cycle `i -> ... -> j -> i` through the spanning tree.
fn tree_cycle(parent: &[Option<usize>], i: usize, j: usize) -> Vec<usize> {
    let ancestors = |mut k: usize| {
        let mut path = vec![k];
        while let Some(p) = parent[k] {
            path.push(p);
            k = p;
        }
        path
    };
    let pi_path = ancestors(i);
    let pj_path = ancestors(j);
    let lca = *pi_path.iter().find(|k| pj_path.contains(k)).expect("same component");
    let mut cycle: Vec<usize> = pi_path.iter().copied().take_while(|&k| k != lca).collect();
    cycle.push(lca);
    let down: Vec<usize> = pj_path.iter().copied().take_while(|&k| k != lca).collect();
    cycle.extend(down.into_iter().rev());
    cycle.push(i);
    cycle
}

/// The three entropy–noise interaction terms at one positive point, summed.
fn a5_lhs(u: &[f64], params: &ModelParams) -> f64 {
    let n = params.n;
    let sigma = sigma_eval(u, params);
    let jac = sigma_jacobian(u, params);
    let logs: Vec<f64> = u.iter().map(|v| v.ln()).collect();
    let first = (0..n)
        .map(|j| {
            let s: f64 = (0..n).map(|i| sigma[(i, j)] * logs[i]).sum();
            s * s
        })
        .fold(0.0, f64::max);
    let mut second = 0.0;
    for i in 0..n {
        for j in 0..n {
            for (k, dk) in jac.iter().enumerate() {
                second += dk[(i, j)] * sigma[(j, k)] * logs[i];
            }
        }
    }
    let mut third = 0.0;
    for i in 0..n {
        for j in 0..n {
            third += sigma[(i, j)] * sigma[(i, j)] / u[j];
        }
    }
    first + second.abs() + third.abs()
}

/// Smallest fraction of `box_max` that [`a5_constant_estimate`] samples.
const A5_LOWER_FRACTION: f64 = 1e-9;

/// Empirical constant `C_h` bounding the entropy–noise interaction terms by
/// `C_h (1 + Σ_i (u_i (log u_i - 1) + 1))` over `(0, box_max]^n`.
///
/// Coordinates are drawn log-uniformly from `[1e-9 box_max, box_max]`; the
/// estimate is the running maximum over `samples` draws from a single seeded
/// stream, so extending `samples` can only increase it.
pub fn a5_constant_estimate(params: &ModelParams, box_max: f64, samples: usize, seed: u64) -> Result<f64> {
    if !(box_max > 0.0 && box_max.is_finite()) {
        return Err(SktError::domain(format!("box_max must be positive, got {box_max}")));
    }
    if samples == 0 {
        return Err(SktError::domain("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (box_max * A5_LOWER_FRACTION).ln();
    let hi = box_max.ln();
    let mut u = vec![0.0; params.n];
    let mut best = 0.0f64;
    for _ in 0..samples {
        for v in u.iter_mut() {
            *v = (lo + (hi - lo) * rng.random::<f64>()).exp();
        }
        let denom = 1.0 + u.iter().map(|&v| entropy_density_scalar(v)).sum::<f64>();
        let ratio = a5_lhs(&u, params) / denom;
        if ratio.is_finite() {
            best = best.max(ratio);
        }
    }
    Ok(best)
}

fn check_point(u_point: &[f64], params: &ModelParams) -> Result<()> {
    if u_point.len() != params.n {
        return Err(SktError::domain(format!(
            "point has {} components, model has {} species",
            u_point.len(),
            params.n
        )));
    }
    Ok(())
}
