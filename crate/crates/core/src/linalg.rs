//! Small dense and banded symmetric positive-definite solvers.
//!
//! The FEM stiffness matrix on a lattice numbered row by row has a half
//! bandwidth of `grid_n + 2`, so a banded Cholesky factorization is both exact
//! and cheap at the grid sizes used here. The same storage backs the weighted
//! graph Laplacians of the TV solver.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Symmetric banded matrix stored by lower band rows.
///
/// Row `i` holds entries for columns `i - bw ..= i`; entry `(i, j)` sits at
/// `data[i * (bw + 1) + bw - (i - j)]`.
#[derive(Debug, Clone)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            let off = self.bw - (i - j0);
            let mut acc = 0.0;
            for (k, j) in (j0..i).enumerate() {
                let a = row[off + k];
                acc += a * x[j];
                y[j] += a * x[i];
            }
            acc += row[self.bw] * x[i];
            y[i] += acc;
        }
    }

    /// Cholesky factorization `A = L Lᵀ` in banded storage.
    pub fn cholesky(&self) -> Result<BandedCholesky, LinalgError> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = self.data.clone();
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                // columns shared by rows i and j
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = l[i * w + bw - (i - j)];
                {
                    let ri = i * w + bw - i;
                    let rj = j * w + bw - j;
                    for k in k0..j {
                        s -= l[ri + k] * l[rj + k];
                    }
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + bw - (i - j)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, l })
    }
}

/// Factor produced by [`BandedSym::cholesky`].
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let w = self.bw + 1;
        let bw = self.bw;
        // L y = b
        for i in 0..self.n {
            let j0 = i.saturating_sub(bw);
            let base = i * w + bw - i;
            let mut s = b[i];
            for j in j0..i {
                s -= self.l[base + j] * b[j];
            }
            b[i] = s / self.l[i * w + bw];
        }
        // Lᵀ x = y
        for i in (0..self.n).rev() {
            let xi = b[i] / self.l[i * w + bw];
            b[i] = xi;
            let j0 = i.saturating_sub(bw);
            let base = i * w + bw - i;
            for j in j0..i {
                b[j] -= self.l[base + j] * xi;
            }
        }
    }

    /// Solves `A X = B` in place for `B` stored row-major as `n × m`.
    pub fn solve_many_in_place(&self, b: &mut [f64], m: usize) {
        assert_eq!(b.len(), self.n * m);
        let w = self.bw + 1;
        let bw = self.bw;
        for i in 0..self.n {
            let j0 = i.saturating_sub(bw);
            let base = i * w + bw - i;
            let (head, tail) = b.split_at_mut(i * m);
            let row = &mut tail[..m];
            for j in j0..i {
                let lij = self.l[base + j];
                for (r, v) in row.iter_mut().zip(&head[j * m..(j + 1) * m]) {
                    *r -= lij * v;
                }
            }
            let d = 1.0 / self.l[i * w + bw];
            row.iter_mut().for_each(|r| *r *= d);
        }
        for i in (0..self.n).rev() {
            let j0 = i.saturating_sub(bw);
            let base = i * w + bw - i;
            let d = 1.0 / self.l[i * w + bw];
            let (head, tail) = b.split_at_mut(i * m);
            let row = &mut tail[..m];
            row.iter_mut().for_each(|r| *r *= d);
            for j in j0..i {
                let lij = self.l[base + j];
                for (h, v) in head[j * m..(j + 1) * m].iter_mut().zip(row.iter()) {
                    *h -= lij * v;
                }
            }
        }
    }
}

/// Dense Cholesky factor of a small SPD matrix (row-major, lower triangle).
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    n: usize,
    l: Vec<f64>,
}

impl DenseCholesky {
    /// Factors the symmetric matrix `a` (row-major `n × n`; only the lower
    /// triangle is read).
    pub fn new(a: &[f64], n: usize) -> Result<Self, LinalgError> {
        if a.len() != n * n {
            return Err(LinalgError::Dimension {
                expected: n * n,
                got: a.len(),
            });
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }
}

/// Householder QR of a tall `rows × cols` matrix (`rows ≥ cols`).
#[derive(Debug, Clone)]
pub struct HouseholderQr {
    rows: usize,
    cols: usize,
    /// Column-major; `R` on and above the diagonal.
    a: Vec<f64>,
    /// Reflector `k` acts on entries `k..rows`.
    v: Vec<Vec<f64>>,
    beta: Vec<f64>,
}

impl HouseholderQr {
    /// Factors the row-major matrix `a`.
    pub fn new(a: &[f64], rows: usize, cols: usize) -> Result<Self, LinalgError> {
        if a.len() != rows * cols || rows < cols {
            return Err(LinalgError::Dimension {
                expected: rows * cols,
                got: a.len(),
            });
        }
        let mut m = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                m[c * rows + r] = a[r * cols + c];
            }
        }
        let mut vs = Vec::with_capacity(cols);
        let mut betas = Vec::with_capacity(cols);
        for k in 0..cols {
            let mut v = m[k * rows + k..(k + 1) * rows].to_vec();
            let norm = norm2(&v);
            let alpha = if v[0] > 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vv = dot(&v, &v);
            let beta = if vv > 0.0 { 2.0 / vv } else { 0.0 };
            for c in k + 1..cols {
                let col = &mut m[c * rows + k..(c + 1) * rows];
                let s = beta * dot(&v, col);
                for (x, vi) in col.iter_mut().zip(&v) {
                    *x -= s * vi;
                }
            }
            m[k * rows + k] = alpha;
            m[k * rows + k + 1..(k + 1) * rows]
                .iter_mut()
                .for_each(|x| *x = 0.0);
            vs.push(v);
            betas.push(beta);
        }
        Ok(Self {
            rows,
            cols,
            a: m,
            v: vs,
            beta: betas,
        })
    }

    pub fn r_entry(&self, i: usize, j: usize) -> f64 {
        if i > j {
            0.0
        } else {
            self.a[j * self.rows + i]
        }
    }

    /// `x ← Qᵀ x`.
    pub fn apply_qt(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        for k in 0..self.cols {
            self.reflect(k, x);
        }
    }

    /// `x ← Q x`.
    pub fn apply_q(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        for k in (0..self.cols).rev() {
            self.reflect(k, x);
        }
    }

    fn reflect(&self, k: usize, x: &mut [f64]) {
        let tail = &mut x[k..];
        let s = self.beta[k] * dot(&self.v[k], tail);
        for (t, vi) in tail.iter_mut().zip(&self.v[k]) {
            *t -= s * vi;
        }
    }

    /// Solves `R y = b` in place on the leading `cols` entries.
    pub fn solve_r_in_place(&self, b: &mut [f64]) -> Result<(), LinalgError> {
        let n = self.cols;
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.r_entry(i, j) * b[j];
            }
            let d = self.r_entry(i, i);
            if d == 0.0 {
                return Err(LinalgError::NotPositiveDefinite { row: i, pivot: d });
            }
            b[i] = s / d;
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense row-major `y = A x` with `A` of shape `rows × cols`.
pub fn gemv(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for (r, yr) in y.iter_mut().enumerate().take(rows) {
        *yr = dot(&a[r * cols..(r + 1) * cols], x);
    }
}

/// Dense row-major `y = Aᵀ x` with `A` of shape `rows × cols`.
pub fn gemv_t(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    y.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (yc, a) in y.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
            *yc += a * xr;
        }
    }
}
