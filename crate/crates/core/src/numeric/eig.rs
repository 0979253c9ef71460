//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! For a symmetric PSD matrix the eigendecomposition is also its SVD, so the
//! returned vectors double as right singular vectors.

use super::matrix::Matrix;
use crate::error::{contract, Result};

const MAX_SWEEPS: usize = 60;

/// Eigenvalues sorted descending together with their eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub singular_values: Vec<f64>,
    pub right_vectors: Matrix,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.singular_values.len()
    }

    /// `U diag(λ) Uᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let u = &self.right_vectors;
        let scaled = Matrix::from_fn(n, n, |i, j| u[(i, j)] * self.singular_values[j]);
        scaled.matmul_t(u).expect("square factors")
    }

    /// The last `count` columns of `U`, i.e. the vectors of the `count`
    /// smallest eigenvalues.
    pub fn trailing_vectors(&self, count: usize) -> Matrix {
        let n = self.dim();
        self.right_vectors.col_block(n - count, count)
    }
}

/// Eigendecomposition of a symmetric positive semi-definite matrix.
///
/// Negative round-off eigenvalues (down to `-1e-10 · max(1, ‖C‖_F)`) are
/// clamped to zero; anything more negative is rejected as not PSD.
pub fn eig_sym_psd(c: &Matrix) -> Result<Spectrum> {
    let n = c.rows();
    if c.cols() != n {
        return Err(contract(
            "eig_sym_psd",
            format!("non-square {:?}", c.shape()),
        ));
    }
    if !c.is_finite() {
        return Err(contract("eig_sym_psd", "non-finite entries"));
    }
    let scale = c.frobenius_norm().max(1.0);
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (c[(i, j)], c[(j, i)]);
            if (a - b).abs() > 1e-8 * scale {
                return Err(contract(
                    "eig_sym_psd",
                    format!("asymmetric at ({i}, {j}): {a} vs {b}"),
                ));
            }
        }
    }

    // Work on the symmetrized copy.
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));

    let tol = -1e-10 * scale;
    let mut values = Vec::with_capacity(n);
    for &i in &order {
        let lambda = a[(i, i)];
        if lambda < tol {
            return Err(contract(
                "eig_sym_psd",
                format!("not PSD: eigenvalue {lambda:e}"),
            ));
        }
        values.push(lambda.max(0.0));
    }
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, dst)] = v[(i, src)];
        }
    }
    Ok(Spectrum {
        singular_values: values,
        right_vectors: vectors,
    })
}

/// One Jacobi rotation zeroing `a[p][q]`; accumulates into `v`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}
