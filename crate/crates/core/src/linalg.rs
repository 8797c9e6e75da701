//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues within this distance below zero are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    SemiDefinite,
    Definite,
}

/// Symmetric square root `S` with `S * S = m`, computed by eigendecomposition.
///
/// Fails with a human-readable reason if `m` is not square, not symmetric, or
/// violates the requested definiteness.
pub fn symmetric_sqrt(m: &DMatrix<f64>, kind: Definiteness) -> Result<DMatrix<f64>, String> {
    if !m.is_square() {
        return Err(format!("not square ({}x{})", m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(format!("not symmetric (max asymmetry {asym:e})"));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let tol = PSD_TOLERANCE * scale;
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        match kind {
            Definiteness::SemiDefinite if lambda < -tol => {
                return Err(format!("not positive semidefinite (eigenvalue {lambda:e})"));
            }
            Definiteness::Definite if lambda <= tol => {
                return Err(format!("not positive definite (eigenvalue {lambda:e})"));
            }
            _ => {}
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    let root = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&root + root.transpose()) * 0.5)
}

/// Block-diagonal matrix with `count` copies of `block`.
pub fn repeat_block_diag(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

/// Largest absolute entry, zero for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.amax()
    }
}
