//! Small dense kernels for the n x n blocks carried at every vertex.
//!
//! Every SPD inverse on the estimation path goes through [`Cholesky`], which
//! rejects a factorization as soon as a pivot drops below
//! `PIVOT_REL_TOL * trace / n`. The dense oracle deliberately does not use
//! this module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative pivot threshold: a pivot below this times `trace / n` is
/// treated as a rank or definiteness failure.
pub const PIVOT_REL_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factor a symmetric matrix. Only the lower triangle of `a` is read.
    ///
    /// On failure returns the index of the offending pivot.
    pub fn factor(a: &Matrix) -> std::result::Result<Self, usize> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
        let threshold = if n == 0 {
            0.0
        } else {
            PIVOT_REL_TOL * trace / n as f64
        };
        if !(trace.is_finite()) || (n > 0 && threshold <= 0.0) {
            return Err(0);
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) {
                return Err(j);
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    /// Factor, mapping failure to [`Error::NonSpd`].
    pub fn factor_spd(a: &Matrix) -> Result<Self> {
        Self::factor(a).map_err(|pivot| Error::NonSpd {
            pivot,
            dim: a.nrows(),
        })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solve `L x = b` in place.
    fn forward(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solve `Lᵀ x = b` in place.
    fn backward(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// `A⁻¹ b`
    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let mut x = b.clone();
        let s = x.as_mut_slice();
        self.forward(s);
        self.backward(s);
        x
    }

    /// `A⁻¹ B`, column by column.
    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let s = col.as_mut_slice();
            self.forward(s);
            self.backward(s);
        }
        x
    }

    /// `L⁻¹ B` (whitening).
    pub fn whiten_mat(&self, b: &Matrix) -> Matrix {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.forward(col.as_mut_slice());
        }
        x
    }

    pub fn whiten_vec(&self, b: &Vector) -> Vector {
        let mut x = b.clone();
        self.forward(x.as_mut_slice());
        x
    }

    /// Symmetrized `A⁻¹`.
    pub fn inverse(&self) -> Matrix {
        symmetrize(&self.solve_mat(&Matrix::identity(self.dim(), self.dim())))
    }
}

/// `(M + Mᵀ) / 2`
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Symmetrized inverse of an SPD matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    Ok(Cholesky::factor_spd(a)?.inverse())
}

/// Number of entries in the packed lower triangle of an n x n matrix.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Row-major lower triangle: (0,0), (1,0), (1,1), (2,0), ...
pub fn pack_lower(m: &Matrix) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unpack_lower(packed: &[f64], n: usize) -> Matrix {
    debug_assert_eq!(packed.len(), packed_len(n));
    let mut m = Matrix::zeros(n, n);
    let mut it = packed.iter();
    for i in 0..n {
        for j in 0..=i {
            let v = *it.next().expect("packed length checked");
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Largest absolute entry.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `max |a - b| / max(|b|, floor)`, the norm-wise relative deviation used in
/// every equivalence check.
pub fn rel_dev(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let num = a
        .iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));
    num / max_abs(b).max(floor)
}

pub fn rel_dev_vec(a: &Vector, b: &Vector, floor: f64) -> f64 {
    let num = a
        .iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));
    let den = b.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    num / den.max(floor)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    let s = symmetrize(m);
    s.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v))
}
