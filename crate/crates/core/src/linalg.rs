//! Small dense symmetric matrices and Cholesky factorization.
//!
//! Every matrix in the crate is tiny (at most the number of fixed effects,
//! T + 1), so a plain row-major buffer with an unblocked Cholesky is all
//! that is needed.

use crate::Real;

/// Dense symmetric matrix, row-major full storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<F> {
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> SymMatrix<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![F::zero(); dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> F {
        self.data[row * self.dim + col]
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, row: usize, col: usize, value: F) {
        self.data[row * self.dim + col] = value;
        self.data[col * self.dim + row] = value;
    }

    /// `self += weight * v vᵀ`.
    pub(crate) fn add_outer(&mut self, v: &[F], weight: F) {
        debug_assert_eq!(v.len(), self.dim);
        for i in 0..self.dim {
            let wi = weight * v[i];
            if wi == F::zero() {
                continue;
            }
            for j in 0..self.dim {
                self.data[i * self.dim + j] += wi * v[j];
            }
        }
    }

    /// `vᵀ self w`.
    pub(crate) fn quad_form(&self, v: &[F], w: &[F]) -> F {
        let mut acc = F::zero();
        for i in 0..self.dim {
            if v[i] == F::zero() {
                continue;
            }
            let mut row = F::zero();
            for j in 0..self.dim {
                row += self.data[i * self.dim + j] * w[j];
            }
            acc += v[i] * row;
        }
        acc
    }

    pub(crate) fn cholesky(&self) -> Result<Cholesky<F>, usize> {
        let n = self.dim;
        let mut l = vec![F::zero(); n * n];
        for j in 0..n {
            let mut diag = self.get(j, j);
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > F::zero()) || !diag.is_finite() {
                return Err(j);
            }
            let d = diag.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut v = self.get(i, j);
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / d;
            }
        }
        Ok(Cholesky { dim: n, l })
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub(crate) struct Cholesky<F> {
    dim: usize,
    l: Vec<F>,
}

impl<F: Real> Cholesky<F> {
    /// Solves `A x = b` given `A = L Lᵀ`.
    pub(crate) fn solve(&self, b: &[F]) -> Vec<F> {
        let n = self.dim;
        let mut x = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[i * n + k];
                x[i] = x[i] - lik * x[k];
            }
            x[i] = x[i] / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = self.l[k * n + i];
                x[i] = x[i] - lki * x[k];
            }
            x[i] = x[i] / self.l[i * n + i];
        }
        x
    }

    /// `log det A`.
    pub(crate) fn log_det(&self) -> F {
        let n = self.dim;
        let mut acc = F::zero();
        for i in 0..n {
            acc += self.l[i * n + i].ln();
        }
        acc + acc
    }

    pub(crate) fn inverse(&self) -> SymMatrix<F> {
        let n = self.dim;
        let mut inv = SymMatrix::zeros(n);
        let mut e = vec![F::zero(); n];
        for j in 0..n {
            e[j] = F::one();
            let col = self.solve(&e);
            e[j] = F::zero();
            for i in 0..n {
                inv.data[i * n + j] = col[i];
            }
        }
        // Symmetrize to remove round-off drift between mirrored entries.
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = (inv.data[i * n + j] + inv.data[j * n + i]) * F::c(0.5);
                inv.data[i * n + j] = avg;
                inv.data[j * n + i] = avg;
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cholesky_solves_small_system() {
        let mut a = SymMatrix::<f64>::zeros(3);
        a.set(0, 0, 4.0);
        a.set(1, 1, 5.0);
        a.set(2, 2, 6.0);
        a.set(0, 1, 1.0);
        a.set(0, 2, 0.5);
        a.set(1, 2, 2.0);
        let chol = a.cholesky().unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = chol.solve(&b);
        for i in 0..3 {
            let mut r = 0.0;
            for j in 0..3 {
                r += a.get(i, j) * x[j];
            }
            approx(r, b[i], 1e-12);
        }
        let inv = chol.inverse();
        let mut trace = 0.0;
        for i in 0..3 {
            let mut r = 0.0;
            for j in 0..3 {
                r += a.get(i, j) * inv.get(j, i);
            }
            trace += r;
        }
        approx(trace, 3.0, 1e-12);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let mut a = SymMatrix::<f64>::zeros(2);
        a.set(0, 0, 1.0);
        a.set(0, 1, 1.0);
        a.set(1, 1, 1.0); // rank 1
        assert_eq!(a.cholesky().err(), Some(1));
    }

    #[test]
    fn log_det_matches_product_of_eigen_factors() {
        let mut a = SymMatrix::<f64>::zeros(2);
        a.set(0, 0, 3.0);
        a.set(1, 1, 2.0);
        a.set(0, 1, 1.0);
        let chol = a.cholesky().unwrap();
        approx(chol.log_det(), (3.0f64 * 2.0 - 1.0).ln(), 1e-12);
    }
}
