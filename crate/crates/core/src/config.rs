//! Run configuration (TOML) and model validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{EnsembleConfig, Functional};
use crate::error::{Result, SktError};
use crate::grid::Grid;
use crate::integrators::{Scheme, StepConfig};
use crate::model::{detailed_balance_solve, ModelParams, Regime, SpeciesFields};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub a0: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    /// Solved from detailed balance when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    pub gamma: f64,
    #[serde(default)]
    pub sigma_scale: f64,
    /// Inferred from the diagonal of `a` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: usize,
    /// Cells per axis.
    pub shape: Vec<usize>,
    /// Domain length per axis; cells must be square in 2D.
    pub extent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant {
        values: Vec<f64>,
    },
    /// `u_i = base_i + amplitude_i cos(mode_i π x / L_x)`, times
    /// `cos(mode_i π y / L_y)` in 2D.
    CosineBump {
        base: Vec<f64>,
        amplitudes: Vec<f64>,
        modes: Vec<u32>,
    },
    /// JSON file `{"values": [[...], ...]}`, one array of cell values per
    /// species; relative paths resolve against the config file.
    FromFile {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    /// Noise step; required by the noise schemes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub scheme: Scheme,
    /// Solver settings; its `scheme` field is replaced by the one above.
    #[serde(default)]
    pub step: StepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub m_paths: usize,
    pub base_seed: u64,
    pub functionals: Vec<Functional>,
    /// Number of equally spaced times in `(0, T]` for the Gronwall check;
    /// 0 disables it.
    pub gronwall_points: usize,
    /// Bound used to count Gronwall violations.
    pub gronwall_k_cap: f64,
    /// Sampling box and sample count for the entropy-noise constant.
    pub a5_box_max: f64,
    pub a5_samples: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            m_paths: 100,
            base_seed: 0,
            functionals: vec![Functional::TerminalStateMean, Functional::SupL1],
            gronwall_points: 0,
            gronwall_k_cap: 2.0,
            a5_box_max: 10.0,
            a5_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub m_paths: usize,
    /// Levels `l` with `η = T 2^{-l}`.
    pub em_levels: Vec<u32>,
    pub wz_levels: Vec<u32>,
    /// Cell counts for the grid-refinement norm study; empty skips it.
    pub grid_cells: Vec<usize>,
    /// Paths and order for the time-regularity table; 0 paths skips it.
    pub seminorm_paths: usize,
    pub seminorm_alpha: f64,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            m_paths: 1000,
            em_levels: (4..=10).collect(),
            wz_levels: (4..=9).collect(),
            grid_cells: Vec::new(),
            seminorm_paths: 0,
            seminorm_alpha: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Ndjson,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Ndjson => "ndjson",
            Format::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Snapshot stride for `simulate`.
    pub stride: usize,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), stride: 1, formats: vec![Format::Ndjson] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub initial: InitialConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory used to resolve relative paths.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SktError::Parse(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form (sorted keys), so configs that
    /// differ only in key order or formatting hash identically.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Step configuration with the scheme from `[time]`.
    pub fn step_config(&self) -> StepConfig {
        StepConfig { scheme: self.time.scheme, ..self.time.step.clone() }
    }

    /// Number of noise intervals `M = T / η` (1 when `η` is not set).
    pub fn noise_steps(&self) -> Result<usize> {
        let t = self.time.t_final;
        let Some(eta) = self.time.eta else {
            if self.time.scheme == Scheme::EntropyImplicit {
                return Ok(1);
            }
            return Err(SktError::rejected("time", "noise schemes need time.eta"));
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(SktError::rejected("time", format!("eta must be positive, got {eta}")));
        }
        if t == 0.0 {
            return Ok(1);
        }
        let m = (t / eta).round();
        if m < 1.0 || (m * eta - t).abs() > 1e-9 * t {
            return Err(SktError::rejected("time", format!("T = {t} is not a multiple of eta = {eta}")));
        }
        Ok(m as usize)
    }

    pub fn ensemble_config(&self, threads: Option<usize>) -> Result<EnsembleConfig> {
        Ok(EnsembleConfig {
            m_paths: self.ensemble.m_paths,
            base_seed: self.ensemble.base_seed,
            t_final: self.time.t_final,
            noise_steps: self.noise_steps()?,
            sample_stride: self.output.stride.max(1),
            threads,
        })
    }

    pub fn build_grid(&self) -> Result<Grid> {
        let g = &self.grid;
        if g.dims != 1 && g.dims != 2 {
            return Err(SktError::rejected("(A1)", format!("only 1D and 2D grids are supported, got d = {}", g.dims)));
        }
        if g.shape.len() != g.dims || g.extent.len() != g.dims {
            return Err(SktError::rejected("grid", "shape and extent need one entry per axis"));
        }
        if g.extent.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(SktError::rejected("(A1)", "domain extent must be positive"));
        }
        let wrap = |e: SktError| SktError::rejected("grid", e.to_string());
        if g.dims == 1 {
            return Grid::unit_interval(g.shape[0], g.extent[0]).map_err(wrap);
        }
        let hx = g.extent[0] / g.shape[0] as f64;
        let hy = g.extent[1] / g.shape[1] as f64;
        if (hx - hy).abs() > 1e-12 * hx {
            return Err(SktError::rejected("grid", format!("cells must be square: hx = {hx}, hy = {hy}")));
        }
        Grid::new_2d(g.shape[0], g.shape[1], hx).map_err(wrap)
    }

    /// Parameters with `π` filled in and the regime checked for the
    /// configured dimension.
    pub fn build_params(&self) -> Result<ModelParams> {
        Ok(self.model_checks()?.0)
    }

    fn model_checks(&self) -> Result<(ModelParams, Vec<String>, bool, bool)> {
        let m = &self.model;
        let n = m.a0.len();
        if n == 0 || m.a.len() != n || m.a.iter().any(|r| r.len() != n) {
            return Err(SktError::rejected("(A3)", format!("a0 has {n} entries, a must be {n} x {n}")));
        }
        if m.a.iter().flatten().chain(&m.a0).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(SktError::rejected("(A3)", "coefficients must be finite and nonnegative"));
        }
        let mut warnings = Vec::new();
        let (pi, solved, disconnected) = match &m.pi {
            Some(pi) => (pi.clone(), false, false),
            None => {
                let db = detailed_balance_solve(&m.a)?;
                if db.disconnected {
                    warnings.push("coupling graph is disconnected; pi normalized with equal component shares".into());
                }
                (db.pi, true, db.disconnected)
            }
        };
        let mut params = ModelParams::new(m.a0.clone(), m.a.clone(), Some(pi), m.gamma, m.sigma_scale)?;
        let regime = m.regime.or_else(|| params.inferred_regime());
        match regime {
            Some(r) => {
                params = params.with_regime(r);
                params.check_regime(self.grid.dims)?;
            }
            None => {
                warnings.push("coefficients match neither the self-diffusion nor the no-self-diffusion regime".into());
                if m.gamma > 1.0 {
                    return Err(SktError::rejected("(A4)", format!("gamma must be <= 1, got {}", m.gamma)));
                }
            }
        }
        if m.sigma_scale > 0.0 && m.gamma < 1.0 {
            warnings.push(format!(
                "(A5): the Ito correction of the built-in noise is not Lipschitz near 0 for gamma = {} < 1",
                m.gamma
            ));
        }
        Ok((params, warnings, solved, disconnected))
    }

    /// Initial state on `grid`.
    pub fn build_initial(&self, grid: Grid, n: usize) -> Result<SpeciesFields> {
        let want = |len: usize, what: &str| -> Result<()> {
            if len != n {
                return Err(SktError::rejected("(A2)", format!("initial {what} has {len} entries for {n} species")));
            }
            Ok(())
        };
        let [lx, ly] = grid.extent();
        let u0 = match &self.initial {
            InitialConfig::Constant { values } => {
                want(values.len(), "values")?;
                check_initial_values(values.iter().copied())?;
                SpeciesFields::constant(grid, values)
            }
            InitialConfig::CosineBump { base, amplitudes, modes } => {
                want(base.len(), "base")?;
                want(amplitudes.len(), "amplitudes")?;
                want(modes.len(), "modes")?;
                let two_d = grid.dims() == 2;
                SpeciesFields::from_fn(grid, n, |i, x, y| {
                    let k = modes[i] as f64 * std::f64::consts::PI;
                    let mut c = (k * x / lx).cos();
                    if two_d {
                        c *= (k * y / ly).cos();
                    }
                    base[i] + amplitudes[i] * c
                })
            }
            InitialConfig::FromFile { path } => {
                #[derive(Deserialize)]
                struct File {
                    values: Vec<Vec<f64>>,
                }
                let full = self.resolve(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| SktError::rejected("(A2)", format!("cannot read {}: {e}", full.display())))?;
                let file: File = serde_json::from_str(&text)?;
                want(file.values.len(), "file species")?;
                if file.values.iter().any(|v| v.len() != grid.num_cells()) {
                    return Err(SktError::rejected("(A2)", format!("each species needs {} cell values", grid.num_cells())));
                }
                SpeciesFields::new(grid, file.values).map_err(|e| SktError::rejected("(A2)", e.to_string()))?
            }
        };
        check_initial_values(u0.data().iter().flatten().copied())?;
        Ok(u0)
    }
}

fn check_initial_values(values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(SktError::rejected("(A2)", "initial data must be finite"));
        }
        if v < 0.0 {
            return Err(SktError::rejected("(A2)", format!("initial data must be nonnegative, found {v}")));
        }
    }
    Ok(())
}

/// Outcome of [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub dims: usize,
    pub pi: Vec<f64>,
    /// `π` was solved from detailed balance rather than given.
    pub pi_solved: bool,
    pub disconnected: bool,
    pub regime: Option<Regime>,
    pub warnings: Vec<String>,
}

/// Everything a run needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub params: ModelParams,
    pub grid: Grid,
    pub u0: SpeciesFields,
    pub step: StepConfig,
    pub report: ValidationReport,
}

/// Checks the config against the model assumptions and builds the run
/// inputs. Hard violations are `ConfigRejected` naming the assumption.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedRun> {
    let (params, warnings, pi_solved, disconnected) = cfg.model_checks()?;
    let grid = cfg.build_grid()?;
    let u0 = cfg.build_initial(grid, params.n)?;
    let step = cfg.step_config();
    step.validate().map_err(|e| SktError::rejected("time.step", e.to_string()))?;
    if !(cfg.time.t_final >= 0.0 && cfg.time.t_final.is_finite()) {
        return Err(SktError::rejected("time", "T must be finite and nonnegative"));
    }
    cfg.noise_steps()?;
    if cfg.output.stride == 0 {
        return Err(SktError::rejected("output", "stride must be at least 1"));
    }
    let mut warnings = warnings;
    if params.sigma_scale > 0.0 && step.scheme == Scheme::EntropyImplicit {
        warnings.push("sigma_scale > 0 has no effect with the entropy_implicit scheme".into());
    }
    let report = ValidationReport {
        n: params.n,
        dims: grid.dims(),
        pi: params.pi.clone(),
        pi_solved,
        disconnected,
        regime: params.regime,
        warnings,
    };
    Ok(PreparedRun { params, grid, u0, step, report })
}

/// Validation only; see [`prepare`].
pub fn validate_model(cfg: &RunConfig) -> Result<ValidationReport> {
    prepare(cfg).map(|p| p.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
a0 = [0.5, 0.5]
a = [[0.1, 1.0], [1.0, 0.1]]
gamma = 1.0
sigma_scale = 0.5

[grid]
dims = 1
shape = [16]
extent = [1.0]

[initial]
kind = "cosine_bump"
base = [1.0, 1.0]
amplitudes = [0.3, -0.3]
modes = [1, 2]

[time]
t_final = 0.1
eta = 0.01
scheme = "em_ito"
"#;

    fn rejected_by(err: SktError) -> String {
        match err {
            SktError::ConfigRejected { assumption, .. } => assumption,
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn symmetric_coefficients_get_uniform_pi() {
        let cfg = RunConfig::from_toml_str(BASE).unwrap();
        let report = validate_model(&cfg).unwrap();
        assert!(report.pi_solved);
        assert_eq!(report.pi, vec![0.5, 0.5]);
        assert_eq!(report.regime, Some(Regime::SelfDiffusion));
    }

    #[test]
    fn gamma_bound_without_self_diffusion() {
        let text = BASE
            .replace("a = [[0.1, 1.0], [1.0, 0.1]]", "a = [[0.0, 1.0], [1.0, 0.0]]")
            .replace("gamma = 1.0", "gamma = 0.9");
        let cfg = RunConfig::from_toml_str(&text.replace("dims = 1\nshape = [16]\nextent = [1.0]", "dims = 2\nshape = [8, 8]\nextent = [1.0, 1.0]"))
            .unwrap();
        assert!(validate_model(&cfg).is_ok());
        let cfg = RunConfig::from_toml_str(&text.replace("dims = 1", "dims = 3")).unwrap();
        assert_eq!(rejected_by(validate_model(&cfg).unwrap_err()), "(A4)");
    }

    #[test]
    fn negative_initial_constant_cites_a2() {
        let text = BASE.replace(
            "kind = \"cosine_bump\"\nbase = [1.0, 1.0]\namplitudes = [0.3, -0.3]\nmodes = [1, 2]",
            "kind = \"constant\"\nvalues = [-1.0, 1.0]",
        );
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(rejected_by(validate_model(&cfg).unwrap_err()), "(A2)");
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml_str(BASE).unwrap();
        let permuted = BASE.replace("gamma = 1.0\nsigma_scale = 0.5", "sigma_scale = 0.5\ngamma = 1.0");
        let b = RunConfig::from_toml_str(&permuted).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig::from_toml_str(&BASE.replace("sigma_scale = 0.5", "sigma_scale = 0.6")).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn eta_must_divide_t() {
        let cfg = RunConfig::from_toml_str(&BASE.replace("eta = 0.01", "eta = 0.03")).unwrap();
        assert_eq!(rejected_by(validate_model(&cfg).unwrap_err()), "time");
        let cfg = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.noise_steps().unwrap(), 10);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml_str(&format!("{BASE}\n[output]\nbogus = 1\n")).is_err());
    }

    #[test]
    fn initial_from_file_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<Vec<f64>> = vec![vec![1.0; 16], vec![2.0; 16]];
        std::fs::write(dir.path().join("u0.json"), serde_json::json!({ "values": values }).to_string()).unwrap();
        let text = BASE.replace(
            "kind = \"cosine_bump\"\nbase = [1.0, 1.0]\namplitudes = [0.3, -0.3]\nmodes = [1, 2]",
            "kind = \"from_file\"\npath = \"u0.json\"",
        );
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        let prepared = prepare(&RunConfig::from_path(&path).unwrap()).unwrap();
        assert_eq!(prepared.u0.species(1)[5], 2.0);
    }
}
