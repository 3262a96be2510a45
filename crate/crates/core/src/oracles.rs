//! Independent reference routines used by the self-test command and the test
//! suites to cross-check the production paths.
//!
//! Everything here trades speed for obviousness and is size-gated: the dense
//! Hessian assembly refuses `n * r > 64`, the Jacobi eigensolver refuses
//! `n > 64`. None of these routines share code with the implementations they
//! check (Jacobi vs. tridiagonal QR, dense Kronecker assembly vs. streamed
//! rank-one updates, scalar loops vs. BLAS-style kernels).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{MeasurementSet, SensingEnsemble};

/// Largest dimension accepted by [`jacobi_eigen`].
pub const JACOBI_DIM_CAP: usize = 64;

/// Largest `n * r` accepted by the dense Hessian assembly.
pub const DENSE_HESSIAN_CAP: usize = 64;

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues descending with matching eigenvector columns.
pub fn jacobi_eigen(s: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = s.nrows();
    if n != s.ncols() || n == 0 {
        return Err(Error::invalid("jacobi_eigen expects a square matrix"));
    }
    if n > JACOBI_DIM_CAP {
        return Err(Error::invalid(format!(
            "jacobi_eigen is gated to n <= {JACOBI_DIM_CAP}"
        )));
    }

    let mut a = s.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = s.amax().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                // Classic 2x2 rotation annihilating a[p][q].
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite"));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok((values, vectors))
}

/// Dense `nr x nr` Hessian assembly from the Kronecker structure
/// `1/m sum_i [ (||a_i^T X||^2 - y_i) I_r + 2 X^T a_i a_i^T X ] (x) a_i a_i^T`
/// with column-stacked vectorization.
pub fn hessian_dense(
    x: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
) -> Result<DMatrix<f64>> {
    let (n, r) = x.shape();
    if n * r > DENSE_HESSIAN_CAP {
        return Err(Error::invalid(format!(
            "dense Hessian assembly is gated to n*r <= {DENSE_HESSIAN_CAP}"
        )));
    }
    if n != ens.n() {
        return Err(Error::invalid("factor dimension does not match ensemble"));
    }
    y.check_bound_to(ens)?;

    let m = ens.m();
    let mut h = DMatrix::<f64>::zeros(n * r, n * r);
    for i in 0..m {
        let a = ens.vector(i).clone_owned();
        let bx = x.tr_mul(&a); // r x 1
        let w = bx.norm_squared() - y.values()[i];
        // r x r left block: w I_r + 2 (X^T a)(X^T a)^T.
        let mut left = DMatrix::<f64>::identity(r, r) * w;
        left.ger(2.0, &bx, &bx, 1.0);
        // Kronecker product left (x) (a a^T), scaled by 1/m at the end.
        for bj in 0..r {
            for bk in 0..r {
                let coeff = left[(bj, bk)];
                if coeff == 0.0 {
                    continue;
                }
                for p in 0..n {
                    for q in 0..n {
                        h[(bj * n + p, bk * n + q)] += coeff * a[p] * a[q];
                    }
                }
            }
        }
    }
    h.scale_mut(1.0 / m as f64);
    Ok(h)
}

/// Quadratic form `vec(V)^T H vec(V)` against a dense Hessian.
pub fn quadratic_form_dense(h: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let vec_v = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    (vec_v.tr_mul(h) * &vec_v)[(0, 0)]
}

/// The expanded quadratic form written as plain scalar loops:
/// `1/m sum_i [ (||a_i^T X||^2 - y_i) ||a_i^T V||^2 + 2 (a_i^T X V^T a_i)^2 ]`.
pub fn hessian_quadratic_form_naive(
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
) -> Result<f64> {
    if x.shape() != v.shape() || x.nrows() != ens.n() {
        return Err(Error::invalid("shape mismatch in naive quadratic form"));
    }
    y.check_bound_to(ens)?;
    let (n, r) = x.shape();
    let m = ens.m();
    let mut acc = 0.0_f64;
    for i in 0..m {
        let a = ens.vector(i);
        let mut ax_sq = 0.0;
        let mut av_sq = 0.0;
        let mut cross = 0.0;
        for j in 0..r {
            let mut ax = 0.0;
            let mut av = 0.0;
            for p in 0..n {
                ax += a[p] * x[(p, j)];
                av += a[p] * v[(p, j)];
            }
            ax_sq += ax * ax;
            av_sq += av * av;
            cross += ax * av;
        }
        acc += (ax_sq - y.values()[i]) * av_sq + 2.0 * cross * cross;
    }
    Ok(acc / m as f64)
}

/// Central-difference gradient of the loss, entry by entry.
pub fn finite_difference_gradient(
    x: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    h: f64,
) -> Result<DMatrix<f64>> {
    let (n, r) = x.shape();
    let mut g = DMatrix::<f64>::zeros(n, r);
    for p in 0..n {
        for j in 0..r {
            let mut plus = x.clone();
            plus[(p, j)] += h;
            let mut minus = x.clone();
            minus[(p, j)] -= h;
            let fp = crate::objective::loss(&crate::objective::Factor::new(plus)?, ens, y)?;
            let fm = crate::objective::loss(&crate::objective::Factor::new(minus)?, ens, y)?;
            g[(p, j)] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(g)
}

/// Second-order central difference of the loss along direction `v`:
/// `(f(X + hV) - 2 f(X) + f(X - hV)) / h^2`.
pub fn finite_difference_quadratic_form(
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    h: f64,
) -> Result<f64> {
    use crate::objective::{loss, Factor};
    let fp = loss(&Factor::new(x + v * h)?, ens, y)?;
    let f0 = loss(&Factor::new(x.clone())?, ens, y)?;
    let fm = loss(&Factor::new(x - v * h)?, ens, y)?;
    Ok((fp - 2.0 * f0 + fm) / (h * h))
}

/// Brute-force r=2 Procrustes residual: scans rotations and reflections on a
/// theta grid and returns the smallest `||X P - target||_F` seen.
pub fn procrustes_grid_residual_r2(
    x: &DMatrix<f64>,
    target: &DMatrix<f64>,
    grid_step: f64,
) -> Result<f64> {
    if x.ncols() != 2 || target.ncols() != 2 || x.nrows() != target.nrows() {
        return Err(Error::invalid("grid search needs matching n x 2 factors"));
    }
    let mut best = f64::INFINITY;
    let mut theta = 0.0_f64;
    while theta < 2.0 * std::f64::consts::PI {
        let (c, s) = (theta.cos(), theta.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let refl = DMatrix::from_row_slice(2, 2, &[c, s, s, -c]);
        best = best.min((x * rot - target).norm());
        best = best.min((x * refl - target).norm());
        theta += grid_step;
    }
    Ok(best)
}
