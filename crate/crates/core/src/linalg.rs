//! Sparse Newton systems: assembly by rows, a banded direct solver for 1D
//! grids and Jacobi-preconditioned BiCGSTAB for 2D grids.

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, Default)]
pub(crate) struct SparseRows {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    pub fn with_capacity(dim: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(dim + 1);
        row_ptr.push(0);
        SparseRows { dim, row_ptr, cols: Vec::with_capacity(nnz), vals: Vec::with_capacity(nnz) }
    }

    pub fn push(&mut self, col: usize, val: f64) {
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn finish_row(&mut self) {
        self.row_ptr.push(self.cols.len());
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|r| self.row(r).filter(|&(c, _)| c == r).map(|(_, v)| v).sum())
            .collect()
    }

    /// Lower and upper bandwidths.
    fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for r in 0..self.dim {
            for (c, _) in self.row(r) {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

/// Gaussian elimination with partial pivoting on the band, applied to the
/// right-hand side on the fly. Returns `None` for a numerically singular
/// matrix.
pub(crate) fn solve_banded(a: &SparseRows, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.dim();
    let (kl, ku) = a.bandwidths();
    // row-wise band storage with room for the fill pivoting creates
    let upper = kl + ku;
    let width = kl + upper + 1;
    let idx = |i: usize, j: usize| i * width + (j + kl - i);
    let mut band = vec![0.0; n * width];
    for r in 0..n {
        for (c, v) in a.row(r) {
            band[idx(r, c)] += v;
        }
    }
    let mut rhs = b.to_vec();

    for k in 0..n {
        let last_row = (k + kl).min(n - 1);
        let last_col = (k + upper).min(n - 1);
        let mut p = k;
        let mut best = band[idx(k, k)].abs();
        for i in k + 1..=last_row {
            let v = band[idx(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if !(best > 0.0) || !best.is_finite() {
            return None;
        }
        if p != k {
            for j in k..=last_col {
                band.swap(idx(k, j), idx(p, j));
            }
            rhs.swap(k, p);
        }
        let pivot = band[idx(k, k)];
        for i in k + 1..=last_row {
            let l = band[idx(i, k)] / pivot;
            if l == 0.0 {
                continue;
            }
            band[idx(i, k)] = 0.0;
            for j in k + 1..=last_col {
                band[idx(i, j)] -= l * band[idx(k, j)];
            }
            rhs[i] -= l * rhs[k];
        }
    }

    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let last_col = (k + upper).min(n - 1);
        let mut acc = rhs[k];
        for j in k + 1..=last_col {
            acc -= band[idx(k, j)] * x[j];
        }
        x[k] = acc / band[idx(k, k)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Right-preconditioned BiCGSTAB with a Jacobi preconditioner. Stops once
/// `weight * ||r||_2 <= tol`; returns `None` on breakdown or when the
/// iteration budget runs out.
pub(crate) fn solve_bicgstab(a: &SparseRows, b: &[f64], tol: f64, weight: f64, max_iter: usize) -> Option<Vec<f64>> {
    let n = a.dim();
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let norm = |x: &[f64]| dot(x, x).sqrt() * weight;

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if norm(&r) <= tol {
        return Some(x);
    }
    let r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];

    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return None;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.matvec(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Some(x);
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.matvec(&z, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return None;
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= tol {
            return Some(x);
        }
        if omega == 0.0 {
            return None;
        }
    }
    None
}
