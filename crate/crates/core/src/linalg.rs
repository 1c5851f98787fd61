//! Dense matrices for the small systems this crate works with (n <= 8,
//! constraint ranks r <= 2). Entries may be any `Scalar`, so solves remain
//! traceable by both forward- and reverse-mode differentiation.

use crate::diff::Scalar;
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    entries: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            entries: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            entries: rows.concat(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, entries: Vec<S>) -> Self {
        assert_eq!(entries.len(), rows * cols);
        Mat {
            rows,
            cols,
            entries,
        }
    }

    pub fn column(v: &[S]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            entries: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[S] {
        &self.entries
    }

    pub fn col_vec(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, rhs.rows);
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..rhs.cols {
                    out[(i, j)] = out[(i, j)] + a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                let mut acc = S::zero();
                for j in 0..self.cols {
                    acc = acc + self[(i, j)] * v[j];
                }
                acc
            })
            .collect()
    }

    /// A + eps I, guarding regularity of learned velocity Hessians.
    pub fn regularize(&self, eps: f64) -> Mat<S> {
        assert_eq!(self.rows, self.cols, "regularize needs a square matrix");
        let mut out = self.clone();
        if eps != 0.0 {
            let e = S::from_f64(eps);
            for i in 0..self.rows {
                out[(i, i)] = out[(i, i)] + e;
            }
        }
        out
    }

    /// Solves A X = B by LU factorization with partial pivoting. Pivots are
    /// compared on primal magnitude so derivative payloads ride along.
    pub fn solve(&self, rhs: &Mat<S>) -> Result<Mat<S>> {
        LuFactors::factor(self)?.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &[S]) -> Result<Vec<S>> {
        let x = self.solve(&Mat::column(rhs))?;
        Ok(x.entries)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.value().abs())
            .fold(0.0, f64::max)
    }
}

impl<S> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.entries[i * self.cols + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.entries[i * self.cols + j]
    }
}

const PIVOT_FLOOR: f64 = 1e-12;

/// LU factorization of a square matrix, reusable across several right-hand
/// sides of the same system.
pub struct LuFactors<S> {
    lu: Mat<S>,
    perm: Vec<usize>,
}

impl<S: Scalar> LuFactors<S> {
    pub fn factor(a: &Mat<S>) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::InvalidArgument(format!(
                "solve needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut pivot_row = k;
            let mut pivot_mag = lu[(k, k)].value().abs();
            for i in k + 1..n {
                let mag = lu[(i, k)].value().abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = i;
                }
            }
            if !(pivot_mag >= PIVOT_FLOOR) {
                return Err(Error::SingularMatrix { pivot_index: k });
            }
            if pivot_row != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(pivot_row, j)];
                    lu[(pivot_row, j)] = tmp;
                }
                perm.swap(k, pivot_row);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                for j in k + 1..n {
                    lu[(i, j)] = lu[(i, j)] - factor * lu[(k, j)];
                }
            }
        }
        Ok(LuFactors { lu, perm })
    }

    pub fn solve(&self, rhs: &Mat<S>) -> Result<Mat<S>> {
        let n = self.lu.rows;
        if rhs.rows != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rhs.rows,
            });
        }
        let k = rhs.cols;
        let mut x = Mat::zeros(n, k);
        for j in 0..k {
            // forward substitution on the permuted rhs
            for i in 0..n {
                let mut acc = rhs[(self.perm[i], j)];
                for l in 0..i {
                    acc = acc - self.lu[(i, l)] * x[(l, j)];
                }
                x[(i, j)] = acc;
            }
            // back substitution
            for i in (0..n).rev() {
                let mut acc = x[(i, j)];
                for l in i + 1..n {
                    acc = acc - self.lu[(i, l)] * x[(l, j)];
                }
                x[(i, j)] = acc / self.lu[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn solve_vec(&self, rhs: &[S]) -> Result<Vec<S>> {
        let x = self.solve(&Mat::column(rhs))?;
        Ok(x.entries)
    }
}

/// Upper-triangle pair count for an m-dimensional Hessian.
pub fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Index of pair (i, j) in the packed upper triangle, order-insensitive.
pub fn tri_idx(m: usize, i: usize, j: usize) -> usize {
    let (p, q) = if i <= j { (i, j) } else { (j, i) };
    p * m - p * (p + 1) / 2 + q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Dual;

    #[test]
    fn identity_solve_returns_rhs() {
        let a = Mat::<f64>::identity(3);
        let b = Mat::column(&[1.0, -2.0, 3.5]);
        let x = a.solve(&b).unwrap();
        assert_eq!(x.entries(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn diagonal_solve_by_hand() {
        // [[2,0],[0,4]] x = (2,8) -> (1,2)
        let a = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let x = a.solve_vec(&[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        match a.solve_vec(&[1.0, 1.0]) {
            Err(Error::SingularMatrix { pivot_index }) => assert_eq!(pivot_index, 1),
            other => panic!("expected singular matrix error, got {other:?}"),
        }
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let x = a.solve_vec(&[3.0, 7.0]).unwrap();
        assert!((x[0] - 7.0).abs() < 1e-15);
        assert!((x[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn regularize_shifts_diagonal() {
        let a = Mat::<f64>::zeros(2, 2);
        let r = a.regularize(1.0);
        assert_eq!(r, Mat::identity(2));
        let i = Mat::<f64>::identity(2);
        let r = i.regularize(1e-6);
        assert!((r[(0, 0)] - 1.000001).abs() < 1e-15);
        assert!((r[(1, 1)] - 1.000001).abs() < 1e-15);
        let unchanged = i.regularize(0.0);
        assert_eq!(unchanged, i);
    }

    #[test]
    fn solve_is_dual_traceable() {
        // x(t) solves [[t, 1], [0, 2]] x = (t, 4): x0 = (t - 2)/t = 1 - 2/t,
        // so dx0/dt = 2/t^2 at t = 2 is 0.5.
        let t = Dual::<f64>::variable(2.0);
        let a = Mat::from_rows(&[
            vec![t, Dual::from_f64(1.0)],
            vec![Dual::from_f64(0.0), Dual::from_f64(2.0)],
        ]);
        let x = a.solve_vec(&[t, Dual::from_f64(4.0)]).unwrap();
        assert!((x[0].re - 0.0).abs() < 1e-15);
        assert!((x[0].du - 0.5).abs() < 1e-14);
    }

    #[test]
    fn tri_indexing_round_trip() {
        let m = 8;
        let mut seen = vec![false; tri_len(m)];
        for i in 0..m {
            for j in i..m {
                let k = tri_idx(m, i, j);
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(k, tri_idx(m, j, i));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
