//! Orthogonal Procrustes alignment, the recovery-error metric, the
//! incoherence statistic, and membership tests for the contraction region.
//!
//! A factor is only identifiable up to a right orthonormal transform, so all
//! error measurements first solve `min_Q ||X Q - target||_F` over orthonormal
//! `Q` (rotations and reflections) and report the aligned residual.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::svd_small;
use crate::model::SensingEnsemble;
use crate::objective::Factor;

/// Constant in front of both region bounds.
const RIC_CONSTANT: f64 = 1.0 / 24.0;

/// An optimal orthonormal alignment and its residual.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    q: DMatrix<f64>,
    residual: f64,
}

impl AlignmentResult {
    /// The optimal r x r orthonormal matrix.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `||X Q - target||_F` at the optimum.
    pub fn residual(&self) -> f64 {
        self.residual
    }
}

fn check_shapes(x: &Factor, target: &Factor) -> Result<()> {
    if x.matrix().shape() != target.matrix().shape() {
        return Err(Error::invalid(format!(
            "factor shape {:?} does not match target shape {:?}",
            x.matrix().shape(),
            target.matrix().shape()
        )));
    }
    Ok(())
}

/// Solves the orthogonal Procrustes problem `min_Q ||X Q - target||_F` over
/// all orthonormal `Q`, reflections included: with `X^T target = U S V^T`,
/// the minimizer is `Q = U V^T`.
///
/// When `X^T target` is rank deficient the minimizer is not unique; any
/// SVD-consistent choice is returned and only residual minimality is
/// guaranteed.
pub fn procrustes_align(x: &Factor, target: &Factor) -> Result<AlignmentResult> {
    check_shapes(x, target)?;
    let cross = x.matrix().tr_mul(target.matrix());
    let svd = svd_small(&cross)?;
    let q = &svd.u * svd.v.transpose();
    let residual = (x.matrix() * &q - target.matrix()).norm();
    Ok(AlignmentResult { q, residual })
}

/// The estimation-error metric: Frobenius residual after optimal alignment.
pub fn recovery_distance(x: &Factor, target: &Factor) -> Result<f64> {
    Ok(procrustes_align(x, target)?.residual())
}

/// Entrywise prediction-error statistic
/// `max_l ||a_l^T (X Q - target)||_2` with `Q` the Procrustes alignment.
pub fn incoherence_measure(x: &Factor, target: &Factor, ens: &SensingEnsemble) -> Result<f64> {
    check_shapes(x, target)?;
    if x.n() != ens.n() {
        return Err(Error::invalid(format!(
            "factor dimension {} does not match ensemble n={}",
            x.n(),
            ens.n()
        )));
    }
    let alignment = procrustes_align(x, target)?;
    let diff = x.matrix() * alignment.q() - target.matrix();
    Ok(max_row_response(&diff, ens))
}

/// `max_l ||a_l^T D||_2` for an already-aligned difference `D`.
///
/// Plain ascending-index loops: the arithmetic order is part of the contract
/// (a naive reimplementation must reproduce the value bit for bit).
pub(crate) fn max_row_response(diff: &DMatrix<f64>, ens: &SensingEnsemble) -> f64 {
    let (n, r) = diff.shape();
    let mut best = 0.0_f64;
    for i in 0..ens.m() {
        let a = ens.vector(i);
        let mut norm_sq = 0.0;
        for j in 0..r {
            let mut dot = 0.0;
            for p in 0..n {
                dot += a[p] * diff[(p, j)];
            }
            norm_sq += dot * dot;
        }
        best = best.max(norm_sq.sqrt());
    }
    best
}

/// Outcome of the two region conditions, each with its signed slack.
#[derive(Debug, Clone, Copy)]
pub struct RicStatus {
    /// Aligned Frobenius error within its bound.
    pub frob_ok: bool,
    /// `bound - dist`; nonnegative iff `frob_ok`.
    pub frob_margin: f64,
    /// Incoherence statistic within its bound.
    pub incoh_ok: bool,
    /// `bound - incoherence`; nonnegative iff `incoh_ok`.
    pub incoh_margin: f64,
}

/// Tests membership in the region of incoherence and contraction around
/// `target`:
///
/// ```text
/// dist(X, target)                  <= (1/24) sigma_r^2 / ||target||_F
/// max_l ||a_l^T (X Q - target)||_2 <= (1/24) sqrt(ln n) sigma_r^2 / ||target||_F
/// ```
///
/// The spectrum constants come from the `target` argument, which is the
/// planted truth in every experiment; without a known target the test is
/// unavailable by construction. Natural log.
pub fn ric_membership(x: &Factor, target: &Factor, ens: &SensingEnsemble) -> Result<RicStatus> {
    check_shapes(x, target)?;
    let n = x.n();
    if n < 2 {
        return Err(Error::invalid("ric membership requires n >= 2"));
    }

    let gram = target.matrix().tr_mul(target.matrix());
    let spectrum = svd_small(&gram)?;
    let sigma_r_sq = spectrum.sigma.last().copied().unwrap_or(0.0).max(0.0);
    if sigma_r_sq <= 0.0 {
        return Err(Error::invalid(
            "ric membership requires a full-column-rank target",
        ));
    }
    let frob = target.matrix().norm();
    let scale = RIC_CONSTANT * sigma_r_sq / frob;

    let dist = recovery_distance(x, target)?;
    let incoh = incoherence_measure(x, target, ens)?;

    let frob_bound = scale;
    let incoh_bound = (n as f64).ln().sqrt() * scale;
    Ok(RicStatus {
        frob_ok: dist <= frob_bound,
        frob_margin: frob_bound - dist,
        incoh_ok: incoh <= incoh_bound,
        incoh_margin: incoh_bound - incoh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_ground_truth, sample_sensing_ensemble};

    fn factor(m: DMatrix<f64>) -> Factor {
        Factor::new(m).unwrap()
    }

    #[test]
    fn exact_alignment_recovers_rotation() {
        let gt = generate_ground_truth(6, 2, &[1.5, 1.0], 7).unwrap();
        // A fixed rotation by 0.4 rad.
        let (c, s) = (0.4_f64.cos(), 0.4_f64.sin());
        let p = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let x = factor(gt.factor() * &p);
        let result = procrustes_align(&x, &factor(gt.factor().clone())).unwrap();
        assert!(
            result.residual() <= 1e-10,
            "residual {:e}",
            result.residual()
        );
        // x = T P, so the aligner must be P^T (distinct singular values).
        assert!((result.q() - p.transpose()).amax() < 1e-9);
    }

    #[test]
    fn rank_one_sign_alignment() {
        let t = factor(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]));
        let x = factor(DMatrix::from_column_slice(3, 1, &[-1.0, -2.0, 1.0]));
        let result = procrustes_align(&x, &t).unwrap();
        assert!((result.q()[(0, 0)] + 1.0).abs() < 1e-12);
        assert!(result.residual() < 1e-12);
        assert!(recovery_distance(&x, &t).unwrap() < 1e-12);
    }

    #[test]
    fn distance_to_self_and_scaled_copy() {
        let gt = generate_ground_truth(5, 1, &[1.0], 3).unwrap();
        let t = factor(gt.factor().clone());
        assert!(recovery_distance(&t, &t).unwrap() <= 1e-12);
        // X = 2 X_true, rank 1, unit norm target: dist = 1 with optimal Q=+1.
        let x = factor(gt.factor() * 2.0);
        let d = recovery_distance(&x, &t).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "dist {d}");
    }

    #[test]
    fn incoherence_with_unit_sensing_vector() {
        let t = factor(DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -0.25]));
        let x = factor(DMatrix::from_row_slice(3, 1, &[1.25, 0.5, -0.25]));
        let ens = crate::model::SensingEnsemble::from_vectors(&[[1.0, 0.0, 0.0]], 0).unwrap();
        // Q = +1 here, so the statistic is |first row of (X - T)| = 0.25.
        let v = incoherence_measure(&x, &t, &ens).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert!(incoherence_measure(&t, &t, &ens).unwrap() <= 1e-15);
    }

    #[test]
    fn ric_at_target_has_full_margins() {
        let gt = generate_ground_truth(8, 2, &[1.0, 0.5], 17).unwrap();
        let ens = sample_sensing_ensemble(40, 8, 18).unwrap();
        let t = factor(gt.factor().clone());
        let status = ric_membership(&t, &t, &ens).unwrap();
        assert!(status.frob_ok && status.incoh_ok);
        let scale = gt.sigma_r_sq() / (24.0 * gt.factor().norm());
        assert!((status.frob_margin - scale).abs() < 1e-12);
        assert!((status.incoh_margin - (8.0_f64).ln().sqrt() * scale).abs() < 1e-12);
    }

    #[test]
    fn ric_rejects_large_perturbation() {
        let gt = generate_ground_truth(8, 2, &[1.0, 0.5], 19).unwrap();
        let ens = sample_sensing_ensemble(40, 8, 20).unwrap();
        let t = factor(gt.factor().clone());
        // ||delta||_F = ||X_true||_F puts the iterate far outside the region.
        let mut delta = DMatrix::zeros(8, 2);
        delta[(0, 0)] = gt.factor().norm();
        let x = factor(gt.factor() + delta);
        let status = ric_membership(&x, &t, &ens).unwrap();
        assert!(!status.frob_ok);
        assert!(status.frob_margin < 0.0);
    }

    #[test]
    fn ric_boundary_margin_is_zero() {
        // Perturb along a direction that survives alignment: for a diagonal
        // planted factor, adding alpha * e_n e_1^T keeps Q = I optimal and the
        // distance is exactly alpha.
        let n = 6;
        let t_mat = {
            let mut m = DMatrix::zeros(n, 2);
            m[(0, 0)] = 1.0;
            m[(1, 1)] = 0.5;
            m
        };
        let t = factor(t_mat.clone());
        let sigma_r_sq = 0.25;
        let frob = t_mat.norm();
        let alpha = sigma_r_sq / (24.0 * frob);
        let mut x_mat = t_mat.clone();
        x_mat[(n - 1, 0)] += alpha;
        let x = factor(x_mat);
        let ens = sample_sensing_ensemble(10, n, 21).unwrap();
        let status = ric_membership(&x, &t, &ens).unwrap();
        assert!(
            status.frob_margin.abs() <= 1e-12,
            "margin {:e}",
            status.frob_margin
        );
    }

    #[test]
    fn requires_matching_shapes_and_n_at_least_two() {
        let a = factor(DMatrix::zeros(3, 1).add_scalar(1.0));
        let b = factor(DMatrix::zeros(4, 1).add_scalar(1.0));
        assert!(procrustes_align(&a, &b).is_err());
        let ens = crate::model::SensingEnsemble::from_vectors(&[[1.0]], 0).unwrap();
        let s = factor(DMatrix::from_row_slice(1, 1, &[1.0]));
        assert!(ric_membership(&s, &s, &ens).is_err());
    }
}
