//! Dense lower-triangular Cholesky factorization with explicit pivot reporting.

use nalgebra::{DMatrix, DVector};

/// `A = L Lᵀ` for a symmetric positive definite `A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes `a`, reading only its lower triangle. On failure returns the
    /// index of the first non-positive pivot.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self, usize> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(j);
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.forward_in_place(x.as_mut_slice());
        self.backward_in_place(x.as_mut_slice());
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let slice = col.as_mut_slice();
            self.forward_in_place(slice);
            self.backward_in_place(slice);
        }
        x
    }

    /// `L⁻¹ B`, used to form `Bᵀ A⁻¹ B` as a Gram product.
    pub fn forward_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.forward_in_place(col.as_mut_slice());
        }
        x
    }

    /// `vᵀ A⁻¹ v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let mut z = v.clone();
        self.forward_in_place(z.as_mut_slice());
        z.norm_squared()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
    }
}
