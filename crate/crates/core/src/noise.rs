//! Seeded finite-dimensional Wiener paths and their Wong–Zakai interpolant.
//!
//! Every path is drawn from a ChaCha8 stream selected by `(seed, stream)`, so
//! path `k` of an ensemble is the same no matter which thread builds it.
//! Node values `W(t_k)` are stored alongside the increments; refinement and
//! coarsening copy node values, which keeps shared nodes bitwise equal.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Result, SktError};

/// Stream offset used for Brownian-bridge refinement draws, far from the
/// streams used for ensemble paths.
const BRIDGE_STREAM_BASE: u64 = 1 << 62;

/// An `n`-dimensional Wiener path sampled on a uniform mesh of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    seed: u64,
    stream: u64,
    n: usize,
    t_final: f64,
    steps: usize,
    /// `steps x n`, row-major.
    increments: Vec<f64>,
    /// `(steps + 1) x n`, row-major; row 0 is zero.
    nodes: Vec<f64>,
}

/// Builds the RNG for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples `steps` i.i.d. `N(0, η I_n)` increments with `η = T / steps`.
pub fn sample_path(seed: u64, n: usize, t_final: f64, steps: usize) -> Result<WienerPath> {
    sample_path_stream(seed, 0, n, t_final, steps)
}

/// Like [`sample_path`] but on stream `stream` of `seed`; ensemble path `k`
/// uses stream `k`.
pub fn sample_path_stream(seed: u64, stream: u64, n: usize, t_final: f64, steps: usize) -> Result<WienerPath> {
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(SktError::domain(format!("final time must be nonnegative, got {t_final}")));
    }
    if steps == 0 || n == 0 {
        return Err(SktError::domain("need at least one time step and one dimension"));
    }
    let eta = t_final / steps as f64;
    let sd = eta.sqrt();
    let mut rng = stream_rng(seed, stream);
    let increments: Vec<f64> = (0..steps * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    Ok(WienerPath::from_increments(seed, stream, n, t_final, increments))
}

impl WienerPath {
    fn from_increments(seed: u64, stream: u64, n: usize, t_final: f64, increments: Vec<f64>) -> Self {
        let steps = increments.len() / n;
        let mut nodes = vec![0.0; (steps + 1) * n];
        for k in 0..steps {
            for j in 0..n {
                nodes[(k + 1) * n + j] = nodes[k * n + j] + increments[k * n + j];
            }
        }
        WienerPath { seed, stream, n, t_final, steps, increments, nodes }
    }

    fn from_nodes(seed: u64, stream: u64, n: usize, t_final: f64, nodes: Vec<f64>) -> Self {
        let steps = nodes.len() / n - 1;
        let increments = (0..steps * n).map(|idx| nodes[idx + n] - nodes[idx]).collect();
        WienerPath { seed, stream, n, t_final, steps, increments, nodes }
    }

    /// Path with all increments zero.
    pub fn zero(n: usize, t_final: f64, steps: usize) -> Result<Self> {
        if steps == 0 || n == 0 || !(t_final >= 0.0) {
            return Err(SktError::domain("need T >= 0, one step and one dimension"));
        }
        Ok(Self::from_increments(0, 0, n, t_final, vec![0.0; steps * n]))
    }

    /// Path with prescribed increments (`steps x n`, row-major).
    pub fn from_raw_increments(n: usize, t_final: f64, increments: Vec<f64>) -> Result<Self> {
        if n == 0 || increments.is_empty() || increments.len() % n != 0 {
            return Err(SktError::domain("increment count must be a positive multiple of n"));
        }
        Ok(Self::from_increments(0, 0, n, t_final, increments))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Mesh width `η = T / M`.
    pub fn eta(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_final
        } else {
            k as f64 * self.eta()
        }
    }

    /// Increment `ΔW_k = W(t_{k+1}) - W(t_k)`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.n..(k + 1) * self.n]
    }

    /// `W(t_k)`.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.n..(k + 1) * self.n]
    }

    /// `W(T)`.
    pub fn terminal(&self) -> &[f64] {
        self.node(self.steps)
    }

    /// Piecewise-linear interpolant `W^(η)(t)`.
    pub fn wz_value(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=self.t_final).contains(&t) {
            return Err(SktError::domain(format!("t = {t} outside [0, {}]", self.t_final)));
        }
        if self.t_final == 0.0 {
            return Ok(self.node(0).to_vec());
        }
        let eta = self.eta();
        let k = ((t / eta).floor() as usize).min(self.steps - 1);
        let tk = self.time(k);
        if t == tk {
            return Ok(self.node(k).to_vec());
        }
        if t == self.time(k + 1) {
            return Ok(self.node(k + 1).to_vec());
        }
        let theta = (t - tk) / eta;
        Ok(self
            .node(k)
            .iter()
            .zip(self.node(k + 1))
            .map(|(a, b)| a + theta * (b - a))
            .collect())
    }

    /// Constant slope `ΔW_k / η` of the interpolant on `(t_k, t_{k+1})`.
    pub fn wz_slope(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.steps {
            return Err(SktError::domain(format!("interval {k} out of range 0..{}", self.steps)));
        }
        let eta = self.eta();
        Ok(self.increment(k).iter().map(|d| d / eta).collect())
    }

    /// Halves the mesh by Brownian-bridge midpoint insertion. Coarse node
    /// values are copied bitwise; midpoints use a stream derived from this
    /// path's `(seed, stream)` so refinement is reproducible.
    pub fn refine(&self) -> WienerPath {
        let n = self.n;
        let eta = self.eta();
        let mut rng = stream_rng(self.seed ^ self.stream.rotate_left(17), BRIDGE_STREAM_BASE + self.steps as u64);
        let sd = (eta / 4.0).sqrt();
        let mut nodes = Vec::with_capacity((2 * self.steps + 1) * n);
        nodes.extend_from_slice(self.node(0));
        for k in 0..self.steps {
            let (a, b) = (self.node(k), self.node(k + 1));
            for j in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                nodes.push(0.5 * (a[j] + b[j]) + sd * z);
            }
            nodes.extend_from_slice(b);
        }
        WienerPath::from_nodes(self.seed, self.stream, n, self.t_final, nodes)
    }

    /// Keeps every `factor`-th node; `steps` must be divisible by `factor`.
    pub fn coarsen(&self, factor: usize) -> Result<WienerPath> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(SktError::domain(format!("cannot coarsen {} steps by {factor}", self.steps)));
        }
        let n = self.n;
        let mut nodes = Vec::with_capacity((self.steps / factor + 1) * n);
        for k in (0..=self.steps).step_by(factor) {
            nodes.extend_from_slice(self.node(k));
        }
        Ok(WienerPath::from_nodes(self.seed, self.stream, n, self.t_final, nodes))
    }

    /// Debug dump: one NDJSON line per node with `index`, `t` and `w`.
    pub fn write_ndjson(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            index: usize,
            t: f64,
            w: &'a [f64],
        }
        for k in 0..=self.steps {
            serde_json::to_writer(&mut out, &Line { index: k, t: self.time(k), w: self.node(k) })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
