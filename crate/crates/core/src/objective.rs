//! The nonconvex least-squares objective, its gradient, the Hessian quadratic
//! form, and the leave-one-out variants.
//!
//! For measurements `y_i` and sensing vectors `a_i`,
//!
//! ```text
//! f(X)      = 1/(4m) * sum_i (y_i - ||a_i^T X||^2)^2
//! grad f(X) = 1/m    * sum_i (||a_i^T X||^2 - y_i) a_i a_i^T X
//! ```
//!
//! All reductions run as `m` rank-one updates: neither `a_i a_i^T` nor the
//! `nr x nr` Hessian is ever materialized here, so every evaluation costs
//! `O(mnr)` time and `O(nr)` extra space. The dense Hessian exists only as a
//! size-gated reference routine in [`crate::oracles`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{MeasurementSet, SensingEnsemble};

/// A candidate n x r factor (an iterate or the planted truth).
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    x: DMatrix<f64>,
}

impl Factor {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("factor must be nonempty"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("factor entries must be finite"));
        }
        Ok(Self { x })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn rank(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.x
    }
}

/// A perturbation direction with the same shape as a factor.
#[derive(Debug, Clone)]
pub struct Direction {
    v: DMatrix<f64>,
}

impl Direction {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::invalid("direction must be nonempty"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("direction entries must be finite"));
        }
        Ok(Self { v })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }
}

fn check_instance(x: &DMatrix<f64>, ens: &SensingEnsemble, y: &MeasurementSet) -> Result<()> {
    if x.nrows() != ens.n() {
        return Err(Error::invalid(format!(
            "factor dimension {} does not match ensemble n={}",
            x.nrows(),
            ens.n()
        )));
    }
    y.check_bound_to(ens)
}

fn check_skip(skip: Option<usize>, m: usize) -> Result<()> {
    if let Some(l) = skip {
        if l >= m {
            return Err(Error::invalid(format!(
                "leave-one-out index {l} out of range for m={m}"
            )));
        }
    }
    Ok(())
}

/// Loss over all terms except `skip`, still normalized by `1/4m`.
fn loss_impl(
    x: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    skip: Option<usize>,
) -> Result<f64> {
    check_instance(x, ens, y)?;
    check_skip(skip, ens.m())?;
    let m = ens.m();
    let r = x.ncols();
    let mut b = DVector::<f64>::zeros(r);
    let mut acc = 0.0_f64;
    for i in 0..m {
        if skip == Some(i) {
            continue;
        }
        b.gemv_tr(1.0, x, &ens.vector(i), 0.0);
        let resid = y.values()[i] - b.norm_squared();
        acc += resid * resid;
    }
    Ok(acc / (4.0 * m as f64))
}

/// Gradient over all terms except `skip` plus the matching loss value,
/// sharing one pass over the data. Normalizations stay at `1/m` and `1/4m`
/// even when a term is dropped.
fn gradient_impl(
    x: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    skip: Option<usize>,
) -> Result<(DMatrix<f64>, f64)> {
    check_instance(x, ens, y)?;
    check_skip(skip, ens.m())?;
    let m = ens.m();
    let (n, r) = (x.nrows(), x.ncols());
    let mut b = DVector::<f64>::zeros(r);
    let mut grad = DMatrix::<f64>::zeros(n, r);
    let mut loss_acc = 0.0_f64;
    for i in 0..m {
        if skip == Some(i) {
            continue;
        }
        let a = ens.vector(i);
        b.gemv_tr(1.0, x, &a, 0.0);
        let w = b.norm_squared() - y.values()[i];
        loss_acc += w * w;
        grad.ger(w, &a, &b, 1.0);
    }
    grad.scale_mut(1.0 / m as f64);
    Ok((grad, loss_acc / (4.0 * m as f64)))
}

/// Evaluates the empirical risk at `x`.
pub fn loss(x: &Factor, ens: &SensingEnsemble, y: &MeasurementSet) -> Result<f64> {
    loss_impl(x.matrix(), ens, y, None)
}

/// Evaluates the gradient at `x` as `m` rank-one updates.
pub fn gradient(x: &Factor, ens: &SensingEnsemble, y: &MeasurementSet) -> Result<DMatrix<f64>> {
    Ok(gradient_impl(x.matrix(), ens, y, None)?.0)
}

/// Gradient and loss from a single pass; the solver's inner loop.
pub(crate) fn gradient_and_loss(
    x: &DMatrix<f64>,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    skip: Option<usize>,
) -> Result<(DMatrix<f64>, f64)> {
    gradient_impl(x, ens, y, skip)
}

/// Leave-one-out loss: the `i = l` term is dropped, normalization kept at
/// `1/4m`.
pub fn loo_loss(x: &Factor, ens: &SensingEnsemble, y: &MeasurementSet, l: usize) -> Result<f64> {
    loss_impl(x.matrix(), ens, y, Some(l))
}

/// Leave-one-out gradient: the `i = l` term is dropped, normalization kept at
/// `1/m`.
pub fn loo_gradient(
    x: &Factor,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    l: usize,
) -> Result<DMatrix<f64>> {
    Ok(gradient_impl(x.matrix(), ens, y, Some(l))?.0)
}

/// Quadratic form of the Hessian at `x` in direction `v`:
///
/// ```text
/// 1/m * sum_i [ (||a_i^T X||^2 - y_i) ||a_i^T V||^2 + 2 (a_i^T X V^T a_i)^2 ]
/// ```
pub fn hessian_quadratic_form(
    x: &Factor,
    v: &Direction,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
) -> Result<f64> {
    let (xm, vm) = (x.matrix(), v.matrix());
    if xm.shape() != vm.shape() {
        return Err(Error::invalid(format!(
            "direction shape {:?} does not match factor shape {:?}",
            vm.shape(),
            xm.shape()
        )));
    }
    check_instance(xm, ens, y)?;
    let m = ens.m();
    let r = xm.ncols();
    let mut bx = DVector::<f64>::zeros(r);
    let mut bv = DVector::<f64>::zeros(r);
    let mut acc = 0.0_f64;
    for i in 0..m {
        let a = ens.vector(i);
        bx.gemv_tr(1.0, xm, &a, 0.0);
        bv.gemv_tr(1.0, vm, &a, 0.0);
        let cross = bx.dot(&bv);
        acc += (bx.norm_squared() - y.values()[i]) * bv.norm_squared() + 2.0 * cross * cross;
    }
    Ok(acc / m as f64)
}

/// Applies the Hessian at `x` to a direction, returned in matrix shape.
/// Costs `O(mnr)`; the `nr x nr` operator is never formed.
pub fn hessian_apply(
    x: &Factor,
    v: &Direction,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
) -> Result<DMatrix<f64>> {
    let (xm, vm) = (x.matrix(), v.matrix());
    if xm.shape() != vm.shape() {
        return Err(Error::invalid(format!(
            "direction shape {:?} does not match factor shape {:?}",
            vm.shape(),
            xm.shape()
        )));
    }
    check_instance(xm, ens, y)?;
    let m = ens.m();
    let (n, r) = xm.shape();
    let mut bx = DVector::<f64>::zeros(r);
    let mut bv = DVector::<f64>::zeros(r);
    let mut out = DMatrix::<f64>::zeros(n, r);
    for i in 0..m {
        let a = ens.vector(i);
        bx.gemv_tr(1.0, xm, &a, 0.0);
        bv.gemv_tr(1.0, vm, &a, 0.0);
        let w = bx.norm_squared() - y.values()[i];
        let cross = bx.dot(&bv);
        out.ger(w, &a, &bv, 1.0);
        out.ger(2.0 * cross, &a, &bx, 1.0);
    }
    out.scale_mut(1.0 / m as f64);
    Ok(out)
}

/// Seed of the fixed starting direction used by the power iteration below.
const POWER_ITERATION_SEED: u64 = 0x5eed_0f0e_1dea_cafe;

/// Power-iteration estimate of the Hessian operator norm: the largest
/// magnitude of the quadratic form over unit-Frobenius directions.
///
/// The returned value never exceeds the true norm and is nondecreasing in
/// `iters` (up to floating-point noise). Deterministic: the starting
/// direction comes from a fixed internal seed.
pub fn hessian_operator_norm_estimate(
    x: &Factor,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    iters: usize,
) -> Result<f64> {
    if iters == 0 {
        return Err(Error::invalid("power iteration needs iters >= 1"));
    }
    let (n, r) = x.matrix().shape();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    v.scale_mut(1.0 / norm);

    let mut estimate = 0.0_f64;
    for _ in 0..iters {
        let w = hessian_apply(x, &Direction::new(v.clone())?, ens, y)?;
        let wnorm = w.norm();
        if wnorm == 0.0 {
            return Ok(0.0);
        }
        estimate = wnorm;
        v = w;
        v.scale_mut(1.0 / wnorm);
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_ground_truth, measure, sample_sensing_ensemble};

    fn scalar_instance() -> (Factor, SensingEnsemble, MeasurementSet) {
        // n=2, r=1, m=1, a=(1,0), y=4, X=(1,0).
        let ens = SensingEnsemble::from_vectors(&[[1.0, 0.0]], 0).unwrap();
        let planted = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        let y = crate::model::measure_factor(&planted, &ens).unwrap();
        let x = Factor::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        (x, ens, y)
    }

    #[test]
    fn loss_at_truth_is_zero() {
        let gt = generate_ground_truth(6, 2, &[1.3, 0.7], 2).unwrap();
        let ens = sample_sensing_ensemble(25, 6, 3).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(gt.factor().clone()).unwrap();
        assert!(loss(&x, &ens, &y).unwrap() <= 1e-18);
    }

    #[test]
    fn loss_at_zero_is_quarter_mean_square() {
        let gt = generate_ground_truth(5, 1, &[1.0], 8).unwrap();
        let ens = sample_sensing_ensemble(12, 5, 9).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(DMatrix::zeros(5, 1)).unwrap();
        let expected: f64 = y.values().iter().map(|v| v * v).sum::<f64>() / (4.0 * 12.0);
        assert!((loss(&x, &ens, &y).unwrap() - expected).abs() <= 1e-15 * expected.max(1.0));
    }

    #[test]
    fn scalar_hand_case() {
        let (x, ens, y) = scalar_instance();
        // loss = (1/4)(4-1)^2 = 9/4; gradient = (1)(1-4) a (a^T x) = (-3, 0).
        assert!((loss(&x, &ens, &y).unwrap() - 2.25).abs() < 1e-15);
        let g = gradient(&x, &ens, &y).unwrap();
        assert!((g[(0, 0)] + 3.0).abs() < 1e-15);
        assert!(g[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn gradient_zero_at_truth() {
        let gt = generate_ground_truth(6, 2, &[1.0, 0.6], 12).unwrap();
        let ens = sample_sensing_ensemble(30, 6, 13).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(gt.factor().clone()).unwrap();
        let g = gradient(&x, &ens, &y).unwrap();
        assert!(g.norm() <= 1e-14 * gt.factor().norm());
    }

    #[test]
    fn loo_identities() {
        let gt = generate_ground_truth(5, 2, &[1.2, 0.8], 21).unwrap();
        let ens = sample_sensing_ensemble(9, 5, 22).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(DMatrix::from_fn(5, 2, |i, j| {
            0.3 * (i as f64 + 1.0) - 0.2 * j as f64
        }))
        .unwrap();

        let g = gradient(&x, &ens, &y).unwrap();
        for l in 0..9 {
            let gl = loo_gradient(&x, &ens, &y, l).unwrap();
            // m*g - m*g_loo equals the dropped rank-one term.
            let a = ens.vector(l);
            let b = x.matrix().tr_mul(&a.clone_owned());
            let w = b.norm_squared() - y.values()[l];
            let dropped = a * b.transpose() * w;
            let diff = (&g - &gl) * 9.0 - dropped;
            assert!(diff.amax() <= 1e-12, "l={l}: {:e}", diff.amax());
        }

        assert!(loo_gradient(&x, &ens, &y, 9).is_err());
        assert!(loo_loss(&x, &ens, &y, 100).is_err());
    }

    #[test]
    fn loo_single_measurement_is_empty_sum() {
        let gt = generate_ground_truth(4, 1, &[1.0], 31).unwrap();
        let ens = sample_sensing_ensemble(1, 4, 32).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(DMatrix::from_fn(4, 1, |i, _| i as f64 - 1.5)).unwrap();
        assert_eq!(loo_loss(&x, &ens, &y, 0).unwrap(), 0.0);
        assert_eq!(loo_gradient(&x, &ens, &y, 0).unwrap().amax(), 0.0);
    }

    #[test]
    fn quadratic_form_zero_direction() {
        let gt = generate_ground_truth(4, 2, &[1.0, 0.5], 41).unwrap();
        let ens = sample_sensing_ensemble(11, 4, 42).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(gt.factor().clone()).unwrap();
        let v = Direction::new(DMatrix::zeros(4, 2)).unwrap();
        assert_eq!(hessian_quadratic_form(&x, &v, &ens, &y).unwrap(), 0.0);
    }

    #[test]
    fn power_iteration_scalar_sanity() {
        // n=1, r=1, a=(1), y=1, X=(1): the quadratic form is 2 V^2, norm 2.
        let ens = SensingEnsemble::from_vectors(&[[1.0]], 0).unwrap();
        let x1 = DMatrix::from_column_slice(1, 1, &[1.0]);
        let y = crate::model::measure_factor(&x1, &ens).unwrap();
        let x = Factor::new(x1).unwrap();
        let est = hessian_operator_norm_estimate(&x, &ens, &y, 5).unwrap();
        assert!((est - 2.0).abs() < 1e-12, "estimate {est}");
        assert!(hessian_operator_norm_estimate(&x, &ens, &y, 0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let gt = generate_ground_truth(4, 1, &[1.0], 51).unwrap();
        let ens = sample_sensing_ensemble(6, 4, 52).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(DMatrix::zeros(5, 1)).unwrap();
        assert!(loss(&x, &ens, &y).is_err());
        let xo = Factor::new(DMatrix::zeros(4, 1)).unwrap();
        let v = Direction::new(DMatrix::zeros(4, 2)).unwrap();
        assert!(hessian_quadratic_form(&xo, &v, &ens, &y).is_err());
    }
}
