//! Convergence studies: strong error of the noise schemes against the
//! geometric Brownian motion solution of the homogeneous problem, and
//! stability of the space-time norms under grid refinement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{norm_report, trajectory_fractional_seminorm};
use crate::ensemble::with_threads;
use crate::error::{Result, SktError};
use crate::grid::Grid;
use crate::integrators::{simulate_path, Scheme, StepConfig};
use crate::model::{ModelParams, NoiseLaw, SpeciesFields};
use crate::noise::{sample_path_stream, WienerPath};

/// Shared inputs of the path-based studies.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub u0: SpeciesFields,
    pub params: ModelParams,
    pub cfg: StepConfig,
    pub t_final: f64,
    pub m_paths: usize,
    pub base_seed: u64,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// `x0 exp((s/2) W - s² t / 8)` for homogeneous data and `γ = 1`.
    ClosedForm,
    /// The same scheme on a mesh four times finer than the finest level.
    FinestLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    /// Noise-mesh exponent: `η = T 2^{-level}`.
    pub level: u32,
    pub eta: f64,
    /// Root-mean-square terminal error over contributing paths.
    pub rms: f64,
    /// Mean of the spatial-mean ratio `u(T) / reference`.
    pub mean_ratio: f64,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongStudy {
    pub scheme: Scheme,
    pub stratonovich_correction: bool,
    pub reference: Reference,
    /// Reference is the Stratonovich solution `x0 exp((s/2) W)`.
    pub stratonovich_reference: bool,
    pub rows: Vec<ErrorRow>,
    /// Least-squares slope of `log rms` against `log η`.
    pub slope: f64,
    /// RMS strictly decreases from each level to the next.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WzStudy {
    /// Corrected scheme against the Itô solution.
    pub ito: StrongStudy,
    /// Uncorrected scheme against the Stratonovich solution.
    pub stratonovich: StrongStudy,
}

/// Homogeneous initial values when the closed-form solution applies.
pub fn gbm_initial_values(u0: &SpeciesFields, params: &ModelParams) -> Option<Vec<f64>> {
    if params.gamma != 1.0 || !matches!(params.noise, NoiseLaw::Diagonal) {
        return None;
    }
    let mut x0 = Vec::with_capacity(u0.n());
    for i in 0..u0.n() {
        let s = u0.species(i);
        if s.iter().any(|&v| v != s[0]) {
            return None;
        }
        x0.push(s[0]);
    }
    Some(x0)
}

/// Terminal value of `dX = (s/2) X dW` (Itô) or `dX = (s/2) X ∘ dW`.
pub fn gbm_exact(x0: f64, sigma_scale: f64, w: f64, t: f64, stratonovich: bool) -> f64 {
    let k = 0.5 * sigma_scale;
    let drift = if stratonovich { 0.0 } else { -0.5 * k * k * t };
    x0 * (k * w + drift).exp()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn field_distance(a: &SpeciesFields, b: &SpeciesFields) -> f64 {
    let grid = a.grid();
    let mut sq = 0.0;
    for i in 0..a.n() {
        sq += a.species(i).iter().zip(b.species(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    (sq * grid.cell_volume() / grid.volume()).sqrt()
}

fn mean_ratio(a: &SpeciesFields, b: &SpeciesFields) -> f64 {
    let (ma, mb) = (a.masses(), b.masses());
    ma.iter().zip(&mb).map(|(x, y)| x / y).sum::<f64>() / ma.len() as f64
}

fn oracle_state(u0: &SpeciesFields, x0: &[f64], params: &ModelParams, path: &WienerPath, strat: bool) -> SpeciesFields {
    let w = path.terminal();
    let values: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(i, &x)| gbm_exact(x, params.sigma_scale, w[i], path.t_final(), strat))
        .collect();
    SpeciesFields::constant(*u0.grid(), &values)
}

fn strong_study(setup: &StudySetup, levels: &[u32], scheme: Scheme, correction: bool, strat: bool) -> Result<StrongStudy> {
    if levels.is_empty() || setup.m_paths == 0 {
        return Err(SktError::domain("need at least one level and one path"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SktError::domain("levels must be strictly increasing"));
    }
    let cfg = StepConfig { scheme, stratonovich_correction: correction, ..setup.cfg.clone() };
    let x0 = gbm_initial_values(&setup.u0, &setup.params);
    let reference = if x0.is_some() { Reference::ClosedForm } else { Reference::FinestLevel };
    let finest = *levels.last().unwrap();
    let sample_level = if x0.is_some() { finest } else { finest + 2 };
    let n = setup.params.n;
    let t = setup.t_final;

    // per path: (squared error, ratio) per level, None when the path stopped
    let per_path: Vec<Vec<Option<(f64, f64)>>> = with_threads(setup.threads, || {
        (0..setup.m_paths)
            .into_par_iter()
            .map(|k| -> Result<Vec<Option<(f64, f64)>>> {
                let fine = sample_path_stream(setup.base_seed, k as u64, n, t, 1usize << sample_level)?;
                let target = match &x0 {
                    Some(x0) => Some(oracle_state(&setup.u0, x0, &setup.params, &fine, strat)),
                    None => {
                        let traj = simulate_path(&setup.u0, &fine, &setup.params, &cfg, usize::MAX)?;
                        traj.is_completed().then(|| traj.terminal_state().clone())
                    }
                };
                let Some(target) = target else {
                    return Ok(vec![None; levels.len()]);
                };
                levels
                    .iter()
                    .map(|&l| {
                        let path = fine.coarsen(1usize << (sample_level - l))?;
                        let traj = simulate_path(&setup.u0, &path, &setup.params, &cfg, usize::MAX)?;
                        Ok(traj.is_completed().then(|| {
                            let s = traj.terminal_state();
                            (field_distance(s, &target).powi(2), mean_ratio(s, &target))
                        }))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::with_capacity(levels.len());
    for (li, &l) in levels.iter().enumerate() {
        let (mut sq, mut ratio, mut count) = (0.0, 0.0, 0usize);
        for p in &per_path {
            if let Some((e, r)) = p[li] {
                sq += e;
                ratio += r;
                count += 1;
            }
        }
        if count == 0 {
            return Err(SktError::EnsembleDegenerate);
        }
        rows.push(ErrorRow {
            level: l,
            eta: t / (1u64 << l) as f64,
            rms: (sq / count as f64).sqrt(),
            mean_ratio: ratio / count as f64,
            paths: count,
        });
    }
    let etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let rms: Vec<f64> = rows.iter().map(|r| r.rms).collect();
    let slope = if rows.len() >= 2 { log_log_slope(&etas, &rms) } else { f64::NAN };
    let monotone = rms.windows(2).all(|w| w[1] < w[0]);
    Ok(StrongStudy {
        scheme,
        stratonovich_correction: correction,
        reference,
        stratonovich_reference: strat,
        rows,
        slope,
        monotone,
    })
}

/// Strong error of Euler–Maruyama at `η = T 2^{-l}` for each level, all
/// levels driven by coarsenings of one fine path per sample.
pub fn em_strong_order(setup: &StudySetup, levels: &[u32]) -> Result<StrongStudy> {
    strong_study(setup, levels, Scheme::EmIto, true, false)
}

/// Wong–Zakai with the correction drift against the Itô solution, and
/// without it against the Stratonovich solution, on shared paths.
pub fn wong_zakai_study(setup: &StudySetup, levels: &[u32]) -> Result<WzStudy> {
    Ok(WzStudy {
        ito: strong_study(setup, levels, Scheme::WongZakai, true, false)?,
        stratonovich: strong_study(setup, levels, Scheme::WongZakai, false, true)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormRow {
    pub level: u32,
    pub eta: f64,
    /// Path average of the `W^{α,2}(0,T; L^2)` seminorm.
    pub mean: f64,
    pub paths: usize,
}

/// Time-regularity seminorm of Euler–Maruyama paths as `η` shrinks.
pub fn seminorm_study(setup: &StudySetup, levels: &[u32], alpha: f64) -> Result<Vec<SeminormRow>> {
    let cfg = StepConfig { scheme: Scheme::EmIto, ..setup.cfg.clone() };
    let n = setup.params.n;
    let finest = *levels.iter().max().ok_or_else(|| SktError::domain("need at least one level"))?;
    let per_path: Vec<Vec<Option<f64>>> = with_threads(setup.threads, || {
        (0..setup.m_paths)
            .into_par_iter()
            .map(|k| -> Result<Vec<Option<f64>>> {
                let fine = sample_path_stream(setup.base_seed, k as u64, n, setup.t_final, 1usize << finest)?;
                levels
                    .iter()
                    .map(|&l| {
                        let path = fine.coarsen(1usize << (finest - l))?;
                        let traj = simulate_path(&setup.u0, &path, &setup.params, &cfg, 1)?;
                        if traj.is_completed() {
                            Ok(Some(trajectory_fractional_seminorm(&traj, alpha)?))
                        } else {
                            Ok(None)
                        }
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(levels
        .iter()
        .enumerate()
        .map(|(li, &l)| {
            let vals: Vec<f64> = per_path.iter().filter_map(|p| p[li]).collect();
            SeminormRow {
                level: l,
                eta: setup.t_final / (1u64 << l) as f64,
                mean: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                paths: vals.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cells: usize,
    pub lrho1_w1rho1: f64,
    pub lrho2_grad_pair: Vec<f64>,
    pub l1p2d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStudy {
    pub rows: Vec<GridRow>,
    /// `(max - min) / max` of `lrho1_w1rho1` over the rows.
    pub lrho1_variation: f64,
    /// Same spread for each pair norm.
    pub lrho2_variation: Vec<f64>,
}

fn spread(v: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if hi > 0.0 {
        (hi - lo) / hi
    } else {
        0.0
    }
}

/// Deterministic runs on `[0, length]` with each cell count in `cells`;
/// `make_u0` samples the same initial profile on every grid.
pub fn grid_refinement_study(
    params: &ModelParams,
    cfg: &StepConfig,
    t_final: f64,
    length: f64,
    cells: &[usize],
    make_u0: impl Fn(Grid) -> Result<SpeciesFields>,
) -> Result<GridStudy> {
    let cfg = StepConfig { scheme: Scheme::EntropyImplicit, ..cfg.clone() };
    let mut rows = Vec::with_capacity(cells.len());
    for &m in cells {
        let grid = Grid::unit_interval(m, length)?;
        let u0 = make_u0(grid)?;
        let path = WienerPath::zero(params.n, t_final, 1)?;
        let traj = simulate_path(&u0, &path, params, &cfg, 1)?;
        let report = norm_report(&traj, params)?;
        rows.push(GridRow {
            cells: m,
            lrho1_w1rho1: report.lrho1_w1rho1,
            lrho2_grad_pair: report.lrho2_grad_pair,
            l1p2d: report.l1p2d,
        });
    }
    let pairs = rows.first().map_or(0, |r| r.lrho2_grad_pair.len());
    Ok(GridStudy {
        lrho1_variation: spread(rows.iter().map(|r| r.lrho1_w1rho1)),
        lrho2_variation: (0..pairs).map(|p| spread(rows.iter().map(|r| r.lrho2_grad_pair[p]))).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gbm_setup(m: usize) -> StudySetup {
        let grid = Grid::unit_interval(3, 1.0).unwrap();
        let params = ModelParams::new(vec![0.1], vec![vec![0.2]], None, 1.0, 1.0).unwrap();
        StudySetup {
            u0: SpeciesFields::constant(grid, &[1.0]),
            params,
            cfg: StepConfig::default(),
            t_final: 1.0,
            m_paths: m,
            base_seed: 5,
            threads: None,
        }
    }

    #[test]
    fn slope_of_a_power_law() {
        let x = [0.1, 0.2, 0.4, 0.8];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.5)).collect();
        assert!((log_log_slope(&x, &y) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn closed_form_is_used_for_homogeneous_data() {
        let s = gbm_setup(1);
        assert_eq!(gbm_initial_values(&s.u0, &s.params), Some(vec![1.0]));
        assert_eq!(gbm_exact(1.0, 1.0, 0.0, 1.0, false), (-0.125f64).exp());
        assert_eq!(gbm_exact(2.0, 1.0, 0.4, 1.0, true), 2.0 * 0.2f64.exp());
    }

    #[test]
    fn em_error_shrinks_with_eta() {
        let study = em_strong_order(&gbm_setup(200), &[3, 5, 7]).unwrap();
        assert_eq!(study.reference, Reference::ClosedForm);
        assert!(study.monotone, "{:?}", study.rows);
        assert!(study.slope > 0.3 && study.slope < 0.8, "{}", study.slope);
    }

    #[test]
    fn uncorrected_wong_zakai_tracks_stratonovich() {
        let study = wong_zakai_study(&gbm_setup(100), &[3, 6]).unwrap();
        let last = study.stratonovich.rows.last().unwrap();
        assert!((last.mean_ratio - 1.0).abs() < 0.02, "{last:?}");
        assert!(study.ito.rows.last().unwrap().rms < study.ito.rows[0].rms);
    }

    #[test]
    fn nonhomogeneous_data_uses_a_fine_reference() {
        let mut s = gbm_setup(20);
        s.u0 = SpeciesFields::from_fn(*s.u0.grid(), 1, |_, x, _| 1.0 + 0.2 * (PI * x).cos());
        let study = em_strong_order(&s, &[2, 4]).unwrap();
        assert_eq!(study.reference, Reference::FinestLevel);
        assert!(study.rows[1].rms < study.rows[0].rms);
    }

    #[test]
    fn refinement_study_reports_spreads() {
        let params = ModelParams::new(vec![0.05, 0.05], vec![vec![0.0, 1.0], vec![1.0, 0.0]], None, 0.5, 0.0).unwrap();
        let cfg = StepConfig { dt: 1e-2, ..StepConfig::default() };
        let study = grid_refinement_study(&params, &cfg, 0.1, 1.0, &[8, 16], |g| {
            Ok(SpeciesFields::from_fn(g, 2, |i, x, _| 1.0 + 0.3 * ((i + 1) as f64 * PI * x).cos()))
        })
        .unwrap();
        assert_eq!(study.rows.len(), 2);
        assert!(study.lrho1_variation >= 0.0 && study.lrho1_variation < 0.2);
        assert_eq!(study.lrho2_variation.len(), 1);
    }

    #[test]
    fn seminorm_rows_are_finite() {
        let rows = seminorm_study(&gbm_setup(4), &[3, 4], 0.25).unwrap();
        assert!(rows.iter().all(|r| r.mean.is_finite() && r.paths == 4));
    }
}
