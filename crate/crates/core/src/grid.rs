//! Uniform finite-volume grids on boxes with no-flux boundaries.
//!
//! Cells are indexed row-major with the x index fastest: `c = ix + nx * iy`.
//! The Neumann condition is realised with mirror ghost cells, so a face on the
//! boundary carries zero flux and the discrete Laplacian has zero row and
//! column sums. That property is what makes the deterministic dynamics
//! conserve mass to round-off.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SktError};

/// A uniform 1D or 2D cell grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: usize,
    shape: [usize; 2],
    h: f64,
}

impl Grid {
    /// 1D grid with `cells` cells of width `h`.
    pub fn new_1d(cells: usize, h: f64) -> Result<Self> {
        Self::new(1, [cells, 1], h)
    }

    /// 2D grid with `nx * ny` square cells of width `h`.
    pub fn new_2d(nx: usize, ny: usize, h: f64) -> Result<Self> {
        Self::new(2, [nx, ny], h)
    }

    /// 1D grid covering `[0, length]`.
    pub fn unit_interval(cells: usize, length: f64) -> Result<Self> {
        Self::new_1d(cells, length / cells as f64)
    }

    fn new(dims: usize, shape: [usize; 2], h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(SktError::domain(format!("cell width must be positive, got {h}")));
        }
        if !(1..=2).contains(&dims) {
            return Err(SktError::domain(format!("dims must be 1 or 2, got {dims}")));
        }
        if shape[..dims].iter().any(|&s| s < 3) {
            return Err(SktError::domain(format!(
                "need at least 3 cells per axis, got {:?}",
                &shape[..dims]
            )));
        }
        Ok(Grid { dims, shape, h })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape[..self.dims]
    }

    pub fn nx(&self) -> usize {
        self.shape[0]
    }

    pub fn ny(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn num_cells(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// Measure of one cell, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dims as i32)
    }

    /// Measure of the whole domain.
    pub fn volume(&self) -> f64 {
        self.cell_volume() * self.num_cells() as f64
    }

    /// Side lengths of the box.
    pub fn extent(&self) -> [f64; 2] {
        [
            self.shape[0] as f64 * self.h,
            if self.dims == 2 { self.shape[1] as f64 * self.h } else { 0.0 },
        ]
    }

    /// Cell-centre coordinates of cell `c` (`y = 0` in 1D).
    pub fn center(&self, c: usize) -> [f64; 2] {
        let ix = c % self.shape[0];
        let iy = c / self.shape[0];
        let y = if self.dims == 2 { (iy as f64 + 0.5) * self.h } else { 0.0 };
        [(ix as f64 + 0.5) * self.h, y]
    }

    /// Calls `f(left, right)` for every interior face, x faces first.
    pub fn for_each_face(&self, mut f: impl FnMut(usize, usize)) {
        let (nx, ny) = (self.shape[0], self.shape[1]);
        for iy in 0..ny {
            for ix in 0..nx - 1 {
                let c = ix + nx * iy;
                f(c, c + 1);
            }
        }
        if self.dims == 2 {
            for iy in 0..ny - 1 {
                for ix in 0..nx {
                    let c = ix + nx * iy;
                    f(c, c + nx);
                }
            }
        }
    }

    /// Neighbours of cell `c` present in the grid, at most four.
    pub(crate) fn neighbours(&self, c: usize) -> impl Iterator<Item = usize> {
        let (nx, ny) = (self.shape[0], self.shape[1]);
        let ix = c % nx;
        let iy = c / nx;
        let two_d = self.dims == 2;
        [
            (ix > 0).then(|| c - 1),
            (ix + 1 < nx).then(|| c + 1),
            (two_d && iy > 0).then(|| c - nx),
            (two_d && iy + 1 < ny).then(|| c + nx),
        ]
        .into_iter()
        .flatten()
    }

    /// Number of interior faces times `face_measure * h`, i.e. the quadrature
    /// weight of one face in [`gradient_sq_norm`].
    pub(crate) fn face_weight(&self) -> f64 {
        // face measure h^(d-1), times the dual-cell width h
        self.cell_volume()
    }
}

/// Cell values on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.num_cells() {
            return Err(SktError::domain(format!(
                "field has {} values, grid has {} cells",
                data.len(),
                grid.num_cells()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(SktError::domain(format!("non-finite field value {v}")));
        }
        Ok(ScalarField { grid, data })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField { grid, data: vec![value; grid.num_cells()] }
    }

    /// Samples `f` at cell centres.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let data = (0..grid.num_cells())
            .map(|c| {
                let [x, y] = grid.center(c);
                f(x, y)
            })
            .collect();
        ScalarField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Euclidean norm of the raw cell values.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Discrete `L^2` inner product with cell-volume weights.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.grid.cell_volume() * self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Neumann Laplacian of `f` written into `out`.
///
/// Each cell sums `(f_nb - f_c) / h^2` over its existing neighbours in a
/// fixed order, so the result does not depend on how callers chunk the work.
pub fn laplacian_into(grid: &Grid, f: &[f64], out: &mut [f64]) {
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    for (c, o) in out.iter_mut().enumerate() {
        let fc = f[c];
        let mut acc = 0.0;
        for nb in grid.neighbours(c) {
            acc += f[nb] - fc;
        }
        *o = acc * inv_h2;
    }
}

/// Second-difference Laplacian with mirror ghosts (zero-flux boundary).
pub fn laplacian_neumann(f: &ScalarField) -> ScalarField {
    let mut out = vec![0.0; f.data.len()];
    laplacian_into(&f.grid, &f.data, &mut out);
    ScalarField { grid: f.grid, data: out }
}

/// Face-difference approximation of `\int |\nabla f|^2 dx` on raw cell values.
pub fn gradient_sq_norm_of(grid: &Grid, f: &[f64]) -> f64 {
    let inv_h = 1.0 / grid.h();
    let mut acc = 0.0;
    grid.for_each_face(|l, r| {
        let g = (f[r] - f[l]) * inv_h;
        acc += g * g;
    });
    acc * grid.face_weight()
}

/// Face-difference approximation of `\int |\nabla f|^2 dx`.
pub fn gradient_sq_norm(f: &ScalarField) -> f64 {
    gradient_sq_norm_of(&f.grid, &f.data)
}

/// Face-difference approximation of `\int |\nabla f|^p dx`, summing the
/// p-th powers of the axis components separately.
pub fn gradient_p_norm_pow_of(grid: &Grid, f: &[f64], p: f64) -> f64 {
    let inv_h = 1.0 / grid.h();
    let mut acc = 0.0;
    grid.for_each_face(|l, r| {
        acc += ((f[r] - f[l]) * inv_h).abs().powf(p);
    });
    acc * grid.face_weight()
}

/// Cell-volume weighted sum of raw cell values.
pub fn integrate_of(grid: &Grid, f: &[f64]) -> f64 {
    grid.cell_volume() * f.iter().sum::<f64>()
}

/// Midpoint-rule integral of `f` over the domain.
pub fn integrate(f: &ScalarField) -> f64 {
    integrate_of(&f.grid, &f.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::new_1d(2, 0.1).is_err());
        assert!(Grid::new_1d(8, 0.0).is_err());
        assert!(Grid::new_2d(4, 2, 0.1).is_err());
        let g = Grid::new_2d(4, 5, 0.5).unwrap();
        assert_eq!(g.num_cells(), 20);
        assert!((g.volume() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_zero_laplacian() {
        for grid in [Grid::new_1d(7, 0.1).unwrap(), Grid::new_2d(5, 4, 0.2).unwrap()] {
            let lap = laplacian_neumann(&ScalarField::constant(grid, 3.7));
            assert!(lap.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cosine_is_discrete_eigenvector() {
        let grid = Grid::unit_interval(4, 1.0).unwrap();
        let f = ScalarField::from_fn(grid, |x, _| (PI * x).cos());
        let lap = laplacian_neumann(&f);
        let lambda = 9.372583002030478; // (2/h^2)(1 - cos(pi h)) at h = 1/4
        for (l, v) in lap.data().iter().zip(f.data()) {
            assert!((l + lambda * v).abs() < 1e-12, "{l} vs {}", -lambda * v);
        }
    }

    #[test]
    fn ramp_gradient_and_integral() {
        let grid = Grid::unit_interval(64, 1.0).unwrap();
        let ramp = ScalarField::from_fn(grid, |x, _| x);
        let g = gradient_sq_norm(&ramp);
        assert!((g - 1.0).abs() <= 0.02, "{g}");
        assert!((integrate(&ramp) - 0.5).abs() < 1e-15);
        assert_eq!(gradient_sq_norm(&ScalarField::constant(grid, 2.0)), 0.0);
        assert!((integrate(&ScalarField::constant(grid, 1.0)) - grid.volume()).abs() < 1e-15);
    }

    #[test]
    fn two_d_gradient_of_ramp() {
        let grid = Grid::new_2d(16, 8, 1.0 / 16.0).unwrap();
        let f = ScalarField::from_fn(grid, |x, y| 2.0 * x + y);
        // 15 x-faces per row with slope 2 and 7 y-faces per column with slope 1
        let expected = (15.0 * 8.0 * 4.0 + 7.0 * 16.0 * 1.0) * grid.cell_volume();
        assert!((gradient_sq_norm(&f) - expected).abs() < 1e-12);
    }

    fn field_strategy() -> impl Strategy<Value = (ScalarField, ScalarField)> {
        (3usize..12, 3usize..9, prop::bool::ANY).prop_flat_map(|(nx, ny, two_d)| {
            let grid = if two_d {
                Grid::new_2d(nx, ny, 0.1).unwrap()
            } else {
                Grid::new_1d(nx, 0.1).unwrap()
            };
            let n = grid.num_cells();
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
                .prop_map(move |(a, b)| {
                    (ScalarField::new(grid, a).unwrap(), ScalarField::new(grid, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn laplacian_is_conservative_symmetric_and_nonpositive((f, g) in field_strategy()) {
            let lf = laplacian_neumann(&f);
            let lg = laplacian_neumann(&g);
            let scale = f.norm().max(1.0);
            // integrate(L f) is a sum of O(norm / h^2) terms; compare in those units
            let h2 = f.grid().h().powi(2);
            prop_assert!(integrate(&lf).abs() * h2 <= 1e-12 * scale);
            let sym = lf.dot(&g) - f.dot(&lg);
            prop_assert!(sym.abs() * h2 <= 1e-12 * scale * g.norm().max(1.0));
            prop_assert!(lf.dot(&f) <= 1e-12);
        }

        #[test]
        fn gradient_norm_is_homogeneous((f, _g) in field_strategy(), c in -5.0f64..5.0) {
            let scaled = ScalarField::new(*f.grid(), f.data().iter().map(|v| c * v).collect()).unwrap();
            let a = gradient_sq_norm(&scaled);
            let b = c * c * gradient_sq_norm(&f);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300) + 1e-300);
        }

        #[test]
        fn integrate_is_linear((f, g) in field_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let combo: Vec<f64> = f.data().iter().zip(g.data()).map(|(x, y)| a * x + b * y).collect();
            let lhs = integrate(&ScalarField::new(*f.grid(), combo).unwrap());
            let rhs = a * integrate(&f) + b * integrate(&g);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + f.norm() + g.norm()));
        }
    }
}
