//! Dense row-major f64 matrices with LU-based solve and determinant.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const PIVOT_FLOOR: f64 = 1e-12;

/// LU factorization with partial pivoting, stored in-place.
/// `perm[i]` is the source row of factored row `i`; `sign` tracks row swaps.
struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

fn lu_factor(a: &Matrix) -> Result<Lu> {
    assert_eq!(a.rows(), a.cols(), "LU requires a square matrix");
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;

    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_val < PIVOT_FLOOR {
            return Err(Error::SingularMatrix);
        }
        if pivot_row != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            perm.swap(k, pivot_row);
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            for j in k + 1..n {
                lu[(i, j)] -= factor * lu[(k, j)];
            }
        }
    }
    Ok(Lu { lu, perm, sign })
}

/// Solve `A X = B` for `X` via LU with partial pivoting.
///
/// Errors with [`Error::SingularMatrix`] when a pivot magnitude drops
/// below 1e-12.
pub fn linear_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    assert_eq!(a.rows(), b.rows(), "A and B row counts must agree");
    let f = lu_factor(a)?;
    let n = a.rows();
    let k = b.cols();
    let mut x = Matrix::zeros(n, k);

    for col in 0..k {
        // forward substitution on the permuted right-hand side
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[(f.perm[i], col)];
            for j in 0..i {
                s -= f.lu[(i, j)] * y[j];
            }
            y[i] = s;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= f.lu[(i, j)] * x[(j, col)];
            }
            x[(i, col)] = s / f.lu[(i, i)];
        }
    }
    Ok(x)
}

/// Determinant via sign-tracked LU. Returns 0 for singular input.
pub fn lu_det(a: &Matrix) -> f64 {
    match lu_factor(a) {
        Ok(f) => {
            let n = a.rows();
            let mut det = f.sign;
            for i in 0..n {
                det *= f.lu[(i, i)];
            }
            det
        }
        Err(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn solve_identity_returns_rhs() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let x = linear_solve(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_hand_inverted_2x2() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 1.0]]);
        let x = linear_solve(&a, &Matrix::identity(2)).unwrap();
        let expect = [[0.5, -0.5], [0.5, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((x[(i, j)] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn solve_diagonal_scaling() {
        let mut a = Matrix::identity(3);
        for i in 0..3 {
            a[(i, i)] = 2.0;
        }
        let x = linear_solve(&a, &Matrix::identity(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.5 } else { 0.0 };
                assert_eq!(x[(i, j)], expect);
            }
        }
    }

    #[test]
    fn solve_rejects_singular() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(linear_solve(&a, &Matrix::identity(2)), Err(Error::SingularMatrix)));
    }

    #[test]
    fn det_examples() {
        assert_eq!(lu_det(&Matrix::identity(4)), 1.0);
        let rot = Matrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]);
        assert!((lu_det(&rot) - 1.0).abs() < 1e-15);
        let diag = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert!((lu_det(&diag) - 6.0).abs() < 1e-15);
        let singular = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(lu_det(&singular), 0.0);
    }

    // residual bound from random well-conditioned (diagonally dominant) systems
    #[test]
    fn solve_residual_property() {
        let mut rng = Rng::new(0x5eed_1234);
        for trial in 0..20 {
            let n = 2 + (trial * 3) % 63; // walks sizes up to 64
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.normal();
                }
                a[(i, i)] += n as f64; // diagonal dominance keeps conditioning mild
            }
            let mut b = Matrix::zeros(n, 3);
            for v in b.data_mut() {
                *v = rng.normal();
            }
            let x = linear_solve(&a, &b).unwrap();
            let residual = {
                let ax = a.matmul(&x);
                let mut m = 0.0f64;
                for i in 0..n {
                    for j in 0..3 {
                        m = m.max((ax[(i, j)] - b[(i, j)]).abs());
                    }
                }
                m
            };
            assert!(
                residual <= 1e-9 * b.max_abs().max(1.0),
                "residual {residual} too large for n={n}"
            );
        }
    }
}
