//! Small dense linear-algebra helpers shared across modules.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::tensor::RealMatrix;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// The input is symmetrized first. Eigenvector columns follow the eigenvalue order.
pub fn sym_eigen_desc(m: &RealMatrix) -> (Vec<f64>, RealMatrix) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = RealMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `U diag(f(λ)) U^T` for a symmetric matrix.
pub fn sym_apply(m: &RealMatrix, f: impl Fn(f64) -> f64) -> RealMatrix {
    let (vals, vecs) = sym_eigen_desc(m);
    spectral(&vecs, vals.iter().map(|&v| f(v)))
}

fn spectral(vecs: &RealMatrix, vals: impl Iterator<Item = f64>) -> RealMatrix {
    let mut scaled = vecs.clone();
    for (j, v) in vals.enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    scaled * vecs.transpose()
}

/// Inverse square root of a symmetric positive-definite matrix.
///
/// Eigenvalues are floored at `rel_floor * trace`. Fails if the matrix is not
/// positive definite beyond what the floor can absorb (largest eigenvalue ≤ 0).
pub fn inv_sqrt_spd(m: &RealMatrix, rel_floor: f64) -> Result<InvSqrt> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "inverse square root of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to inverse square root".into()));
    }
    let (vals, vecs) = sym_eigen_desc(m);
    let trace: f64 = vals.iter().sum();
    if vals.first().copied().unwrap_or(0.0) <= 0.0 || trace <= 0.0 {
        return Err(Error::Conditioning(format!(
            "matrix is not positive definite (largest eigenvalue {:e})",
            vals.first().copied().unwrap_or(0.0)
        )));
    }
    let floor = rel_floor * trace;
    let inv_sqrt: Vec<f64> = vals.iter().map(|&v| 1.0 / v.max(floor).sqrt()).collect();
    Ok(InvSqrt {
        matrix: spectral(&vecs, inv_sqrt.iter().copied()),
        vectors: vecs,
        values: inv_sqrt,
    })
}

/// Result of [`inv_sqrt_spd`], kept in spectral form for cheap determinant scaling.
#[derive(Clone, Debug)]
pub struct InvSqrt {
    pub matrix: RealMatrix,
    pub vectors: RealMatrix,
    /// Eigenvalues of `matrix` (descending order of the input eigenvalues).
    pub values: Vec<f64>,
}

impl InvSqrt {
    /// Rescales to unit determinant, `det(L)^(-1/n) L`, computed in log space.
    pub fn det_normalized(&self) -> RealMatrix {
        let n = self.values.len() as f64;
        let mean_log = self.values.iter().map(|v| v.ln()).sum::<f64>() / n;
        let c = (-mean_log).exp();
        spectral(&self.vectors, self.values.iter().map(|v| v * c))
    }
}

/// Log-determinant of a symmetric positive-definite matrix.
pub fn log_det_spd(m: &RealMatrix) -> f64 {
    sym_eigen_desc(m).0.iter().map(|v| v.ln()).sum()
}

/// Largest singular value.
pub fn spectral_norm(m: &RealMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let (vals, _) = sym_eigen_desc(&(m.transpose() * m));
    vals[0].max(0.0).sqrt()
}
