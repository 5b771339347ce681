//! Small dense helpers shared by the filters. Matrices are `nalgebra`
//! dynamic matrices; sizes here are desk scale (m up to a few dozen).

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `(S + S^T) / 2`, exactly symmetric afterwards.
pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let mut out = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Symmetry to `tol` relative to the max-norm of `a`.
pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Positive semidefinite up to `-tol * ||a||` on the smallest eigenvalue.
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() == 0 {
        return true;
    }
    let sym = symmetrize(a);
    let norm = sym.norm();
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues.iter().all(|&l| l >= -tol * norm)
}

/// Cholesky factorization; `None` when `a` is not numerically positive definite.
pub fn cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if !a.is_square() || a.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Cholesky::new(a.clone())
}

/// Square-root-free `L D L^T` factorization of a symmetric positive definite
/// matrix (unit lower `L`, diagonal `D`). `None` if any pivot is not positive.
#[derive(Debug, Clone)]
pub struct Ldlt {
    l: DMatrix<f64>,
    d: Vec<f64>,
}

impl Ldlt {
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        if !a.is_square() || a.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let n = a.nrows();
        let mut l = DMatrix::identity(n, n);
        let mut d = vec![0.0; n];
        for j in 0..n {
            let mut dj = a[(j, j)];
            for k in 0..j {
                dj -= l[(j, k)] * l[(j, k)] * d[k];
            }
            if dj.is_nan() || dj <= 0.0 {
                return None;
            }
            d[j] = dj;
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)] * d[k];
                }
                l[(i, j)] = v / dj;
            }
        }
        Some(Self { l, d })
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.d.len();
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            for i in 0..n {
                let mut v = col[i];
                for k in 0..i {
                    v -= self.l[(i, k)] * col[k];
                }
                col[i] = v;
            }
            for i in 0..n {
                col[i] /= self.d[i];
            }
            for i in (0..n).rev() {
                let mut v = col[i];
                for k in (i + 1)..n {
                    v -= self.l[(k, i)] * col[k];
                }
                col[i] = v;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ldlt_solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0]);
        let x = Ldlt::new(&a).unwrap().solve(&b);
        assert!((&a * x - b).abs().max() < 1e-14);
    }

    #[test]
    fn ldlt_rejects_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(Ldlt::new(&a).is_none());
        assert!(Ldlt::new(&DMatrix::from_element(1, 1, -1.0)).is_none());
    }

    #[test]
    fn symmetry_is_relative() {
        let mut a = DMatrix::from_row_slice(2, 2, &[1e6, 3.0, 3.0, 1.0]);
        a[(0, 1)] += 1e-7;
        assert!(is_symmetric(&a, 1e-12));
        a[(0, 1)] += 1e-3;
        assert!(!is_symmetric(&a, 1e-12));
    }
}
