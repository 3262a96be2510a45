//! Dense symmetric eigenpairs and small SVDs.
//!
//! Everything here is deterministic: no internal randomness, ties broken by
//! fixed conventions, so repeated calls on the same input return identical
//! bytes. Sizes are desk-scale (n in the hundreds at most); we use dense
//! tridiagonalization + QR through `nalgebra` rather than anything iterative.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance used when validating symmetry at construction.
const SYMMETRY_TOL: f64 = 1e-12;

/// Default residual tolerance for [`top_r_eigenpairs`], relative to the
/// spectral norm of the input.
pub const DEFAULT_EIGEN_TOL: f64 = 1e-10;

/// A dense real symmetric matrix, validated at construction.
#[derive(Debug, Clone)]
pub struct SymmetricMatrix {
    data: DMatrix<f64>,
}

impl SymmetricMatrix {
    /// Wraps a square matrix after checking `|S[i][j] - S[j][i]|` against
    /// `1e-12 * max(1, max-abs entry)`.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.is_empty() {
            return Err(Error::invalid("symmetric matrix must be nonempty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("symmetric matrix entries must be finite"));
        }
        let scale = data.amax().max(1.0);
        let n = data.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let skew = (data[(i, j)] - data[(j, i)]).abs();
                if skew > SYMMETRY_TOL * scale {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric: |S[{i}][{j}] - S[{j}][{i}]| = {skew:e}"
                    )));
                }
            }
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.amax()
    }

    /// Spectral norm (largest eigenvalue magnitude) via a full dense
    /// eigendecomposition.
    pub fn spectral_norm(&self) -> Result<f64> {
        let eigen = symmetric_eigen(&self.data)?;
        Ok(eigen
            .eigenvalues
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs())))
    }
}

/// The top-k eigenpairs of a symmetric matrix, eigenvalues descending and
/// eigenvector columns orthonormal.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl EigenPairs {
    /// Eigenvalues, sorted descending.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// n x k matrix whose column j is the eigenvector for `values()[j]`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn symmetric_eigen(m: &DMatrix<f64>) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    nalgebra::SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0).ok_or(Error::ConvergenceFailure {
        best_residual: f64::INFINITY,
    })
}

/// Flips eigenvector signs so the entry of largest magnitude is positive.
/// Makes the output of degenerate-free decompositions reproducible across
/// calls and keeps serialized traces byte-stable.
fn canonicalize_column_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut lead = 0.0_f64;
        let mut lead_abs = 0.0_f64;
        for &v in col.iter() {
            if v.abs() > lead_abs {
                lead_abs = v.abs();
                lead = v;
            }
        }
        if lead < 0.0 {
            col.neg_mut();
        }
    }
}

/// Returns the `r` algebraically largest eigenpairs of `s`.
///
/// The residual `||S v - lambda v||_2 <= tol * ||S||` is enforced for every
/// returned column; a violation is reported as [`Error::ConvergenceFailure`]
/// carrying the worst residual observed.
pub fn top_r_eigenpairs(s: &SymmetricMatrix, r: usize, tol: f64) -> Result<EigenPairs> {
    let n = s.dim();
    if r == 0 || r > n {
        return Err(Error::invalid(format!(
            "requested {r} eigenpairs from a {n}x{n} matrix"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("eigenpair tolerance must be positive"));
    }

    let eigen = symmetric_eigen(s.as_matrix())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let values: Vec<f64> = order[..r].iter().map(|&i| eigen.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, r);
    for (dst, &src) in order[..r].iter().enumerate() {
        vectors.set_column(dst, &eigen.eigenvectors.column(src));
    }
    canonicalize_column_signs(&mut vectors);

    // The matrix norm scale for the residual contract: max |eigenvalue|.
    let spectral = eigen
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let mut worst = 0.0_f64;
    for (&value, v) in values.iter().zip(vectors.column_iter()) {
        let residual = (s.as_matrix() * v - value * v).norm();
        worst = worst.max(residual);
    }
    if worst > tol * spectral.max(f64::MIN_POSITIVE) && worst > tol {
        return Err(Error::ConvergenceFailure {
            best_residual: worst,
        });
    }

    Ok(EigenPairs { values, vectors })
}

/// SVD of a small square matrix, `m = u * diag(sigma) * v^T`.
#[derive(Debug, Clone)]
pub struct SvdSmall {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl SvdSmall {
    /// Reassembles `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let k = self.sigma.len();
        let mut scaled = self.u.clone();
        for j in 0..k {
            scaled.column_mut(j).scale_mut(self.sigma[j]);
        }
        scaled * self.v.transpose()
    }
}

/// Full SVD of a square matrix with singular values sorted descending.
pub fn svd_small(m: &DMatrix<f64>) -> Result<SvdSmall> {
    if m.nrows() != m.ncols() || m.is_empty() {
        return Err(Error::invalid(format!(
            "svd_small expects a nonempty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("svd_small input must be finite"));
    }
    let r = m.nrows();
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, 0).ok_or(
        Error::ConvergenceFailure {
            best_residual: f64::INFINITY,
        },
    )?;
    let u_raw = svd.u.expect("u requested");
    let vt_raw = svd.v_t.expect("v_t requested");

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });

    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut u = DMatrix::zeros(r, r);
    let mut v = DMatrix::zeros(r, r);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &DVector::from(vt_raw.row(src).transpose()));
    }

    let out = SvdSmall { u, sigma, v };
    let err = (out.reconstruct() - m).amax();
    let scale = m.amax().max(1.0);
    if err > 1e-10 * scale {
        return Err(Error::ConvergenceFailure { best_residual: err });
    }
    Ok(out)
}
