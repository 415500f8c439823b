//! Structure-preserving simulation of the stochastic Shigesada–Kawasaki–Teramoto
//! cross-diffusion system with multiplicative noise.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: coefficients, entropy, entropy variables, noise law.
//! * [`grid`]: uniform finite-volume grids with no-flux boundaries.
//! * [`noise`]: seeded Wiener paths and the Wong–Zakai interpolant.
//! * [`integrators`]: positivity-preserving implicit stepping, Euler–Maruyama
//!   splitting and the Wong–Zakai scheme.
//! * [`diagnostics`]: entropy production, space-time norms, fractional
//!   time seminorm, segregation index.
//! * [`ensemble`]: deterministic parallel Monte Carlo.
//! * [`convergence`]: strong-error and grid-refinement studies.
//! * [`config`], [`records`], [`runner`]: run configuration, output files and
//!   command orchestration.

pub mod config;
pub mod convergence;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod integrators;
mod linalg;
pub mod model;
pub mod noise;
pub mod records;
pub mod runner;

pub use error::{Result, SktError};
