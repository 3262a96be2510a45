//! Spectral initialization, the vanilla gradient-descent loop, step-size
//! rules, and leave-one-out diagnostic trajectories.
//!
//! Initialization forms `Y = 1/(2m) sum_i y_i a_i a_i^T`, shifts its top-r
//! eigenvalues by `lambda = 1/(2m) sum_i y_i`, and scales the eigenvectors:
//! `X_0 = Z_0 Lambda_0^{1/2}`. The loop is plain `X <- X - mu * grad f(X)`,
//! no projection or truncation anywhere.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::alignment::{incoherence_measure, procrustes_align, recovery_distance};
use crate::error::{Error, Result};
use crate::kernels::{top_r_eigenpairs, SymmetricMatrix, DEFAULT_EIGEN_TOL};
use crate::model::{GroundTruth, MeasurementSet, SensingEnsemble};
use crate::objective::{gradient_and_loss, Factor};

/// Largest `n` for which the init matrix is materialized densely by default.
/// Above the cap initialization is refused instead of silently switching
/// algorithms.
pub const DEFAULT_INIT_DIM_CAP: usize = 2048;

/// Default relative-distance threshold for declaring success when the ground
/// truth is available.
pub const DEFAULT_SUCCESS_REL_DIST: f64 = 1e-5;

/// Step-size policy for the gradient loop.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    /// Constant caller-chosen step.
    Fixed { mu: f64 },
    /// `mu = c4 / ((r kappa + ln n)^2 sigma_r^2)`.
    Theorem1 { c4: f64 },
    /// Conservative rate for the first `T_a = ceil(c6 * max(kappa^2 r^2 ln n,
    /// ln^3 n))` iterations, then the relaxed
    /// `mu = c7 / (r^2 kappa^2 sigma_r^2)`.
    Corollary { c6: f64, c7: f64 },
}

impl StepRule {
    pub fn theorem1() -> Self {
        StepRule::Theorem1 { c4: 1.0 }
    }

    pub fn corollary() -> Self {
        StepRule::Corollary { c6: 1.0, c7: 1.0 }
    }
}

/// Configuration of one recovery run.
#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    /// Rank of the sought factor.
    pub rank: usize,
    /// Gradient-step budget. Zero runs initialization only.
    pub max_iters: usize,
    pub step_rule: StepRule,
    /// Early stop when `||grad||_F / ||X_t||_F` falls below this.
    pub stop_grad_tol: f64,
    /// Early stop on relative distance; only used when a ground truth is
    /// supplied, and doubles as the success threshold.
    pub stop_dist_tol: Option<f64>,
    /// Record a trace row every this many iterations (plus first and last).
    pub trace_every: usize,
    /// Provenance seed carried into reports; the solver itself draws no
    /// randomness.
    pub seed: u64,
    /// Dense-initialization dimension cap.
    pub init_dim_cap: usize,
}

impl RecoveryConfig {
    pub fn for_rank(rank: usize) -> Self {
        Self {
            rank,
            max_iters: 2000,
            step_rule: StepRule::theorem1(),
            stop_grad_tol: 1e-10,
            stop_dist_tol: None,
            trace_every: 1,
            seed: 0,
            init_dim_cap: DEFAULT_INIT_DIM_CAP,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        if !(self.stop_grad_tol > 0.0) {
            return Err(Error::invalid("stop_grad_tol must be positive"));
        }
        if let Some(t) = self.stop_dist_tol {
            if !(t > 0.0) {
                return Err(Error::invalid("stop_dist_tol must be positive"));
            }
        }
        if self.trace_every == 0 {
            return Err(Error::invalid("trace_every must be >= 1"));
        }
        if let StepRule::Fixed { mu } = self.step_rule {
            if !(mu > 0.0) {
                return Err(Error::invalid("fixed step size must be positive"));
            }
        }
        Ok(())
    }
}

/// Output of spectral initialization.
#[derive(Debug, Clone)]
pub struct InitResult {
    /// `X_0 = Z_0 Lambda_0^{1/2}`.
    pub x0: DMatrix<f64>,
    /// Top-r eigenvalues of the init matrix, descending.
    pub eigvals: Vec<f64>,
    /// The shift: half the sample mean of the measurements.
    pub lambda: f64,
    /// Shifted, clamped diagonal entries `max(eigvals[i] - lambda, 0)`.
    pub lambda0: Vec<f64>,
    /// How many shifted eigenvalues were clamped at zero.
    pub clamped: usize,
}

/// Assembles the init matrix `1/(2m) sum_i y_i a_i a_i^T`, optionally
/// skipping one index.
fn init_matrix(
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    skip: Option<usize>,
) -> (SymmetricMatrix, f64) {
    let m = ens.m();
    let n = ens.n();
    let half_inv_m = 1.0 / (2.0 * m as f64);
    let mut mat = DMatrix::<f64>::zeros(n, n);
    let mut lambda = 0.0;
    for i in 0..m {
        if skip == Some(i) {
            continue;
        }
        let a = ens.vector(i);
        mat.ger(y.values()[i] * half_inv_m, &a, &a, 1.0);
        lambda += y.values()[i];
    }
    lambda *= half_inv_m;
    let sym = SymmetricMatrix::new(mat).expect("rank-one assembly is exactly symmetric");
    (sym, lambda)
}

/// Spectral initialization from an explicit init matrix and shift. This is
/// the deterministic core of [`spectral_init`]; tests feed it population
/// quantities directly.
pub fn spectral_init_from_matrix(
    y_mat: &SymmetricMatrix,
    lambda: f64,
    r: usize,
) -> Result<InitResult> {
    let pairs = top_r_eigenpairs(y_mat, r, DEFAULT_EIGEN_TOL)?;
    let mut lambda0 = Vec::with_capacity(r);
    let mut clamped = 0;
    for &v in pairs.values() {
        let shifted = v - lambda;
        if shifted <= 0.0 {
            clamped += 1;
            lambda0.push(0.0);
        } else {
            lambda0.push(shifted);
        }
    }
    let mut x0 = pairs.vectors().clone();
    for (j, l) in lambda0.iter().enumerate() {
        x0.column_mut(j).scale_mut(l.sqrt());
    }
    Ok(InitResult {
        x0,
        eigvals: pairs.values().to_vec(),
        lambda,
        lambda0,
        clamped,
    })
}

/// Spectral initialization from data.
pub fn spectral_init(ens: &SensingEnsemble, y: &MeasurementSet, r: usize) -> Result<InitResult> {
    spectral_init_capped(ens, y, r, DEFAULT_INIT_DIM_CAP, None)
}

fn spectral_init_capped(
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    r: usize,
    dim_cap: usize,
    skip: Option<usize>,
) -> Result<InitResult> {
    y.check_bound_to(ens)?;
    if r == 0 || r > ens.n() {
        return Err(Error::invalid(format!(
            "rank must satisfy 1 <= r <= n, got r={r}, n={}",
            ens.n()
        )));
    }
    if ens.n() > dim_cap {
        return Err(Error::invalid(format!(
            "n={} exceeds the dense initialization cap {dim_cap}; \
             refusing to materialize the init matrix",
            ens.n()
        )));
    }
    let (mat, lambda) = init_matrix(ens, y, skip);
    spectral_init_from_matrix(&mat, lambda, r)
}

/// Evaluates a step-size rule from spectrum estimates.
pub fn step_size(
    rule: &StepRule,
    sigma_r_sq_est: f64,
    frob_sq_est: f64,
    n: usize,
    r: usize,
    kappa_est: f64,
) -> Result<f64> {
    if n == 0 || r == 0 {
        return Err(Error::invalid("step size needs n >= 1 and r >= 1"));
    }
    if !(sigma_r_sq_est > 0.0) || !(frob_sq_est > 0.0) || !(kappa_est > 0.0) {
        return Err(Error::invalid(
            "step size requires positive spectrum estimates",
        ));
    }
    let ln_n = (n as f64).ln();
    match rule {
        StepRule::Fixed { mu } => {
            if !(*mu > 0.0) {
                return Err(Error::invalid("fixed step size must be positive"));
            }
            Ok(*mu)
        }
        StepRule::Theorem1 { c4 } => {
            let denom = (r as f64 * kappa_est + ln_n).powi(2) * sigma_r_sq_est;
            Ok(c4 / denom)
        }
        StepRule::Corollary { c7, .. } => {
            let rf = r as f64;
            Ok(c7 / (rf * rf * kappa_est * kappa_est * sigma_r_sq_est))
        }
    }
}

/// Iteration at which the corollary rule switches to its relaxed step.
pub fn corollary_switch_iteration(c6: f64, kappa: f64, r: usize, n: usize) -> usize {
    let ln_n = (n as f64).ln();
    let rf = r as f64;
    let t = c6 * (kappa * kappa * rf * rf * ln_n).max(ln_n.powi(3));
    t.ceil().max(0.0) as usize
}

/// One gradient step `X - mu * grad f(X)`.
pub fn gd_step(x: &Factor, mu: f64, ens: &SensingEnsemble, y: &MeasurementSet) -> Result<Factor> {
    if !(mu > 0.0) {
        return Err(Error::invalid("step size must be positive"));
    }
    let (grad, _) = gradient_and_loss(x.matrix(), ens, y, None)?;
    Factor::new(x.matrix() - grad * mu)
}

/// One recorded trace row. Values describe the iterate entering iteration
/// `t`, before that iteration's gradient step.
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    pub dist: Option<f64>,
    pub incoherence: Option<f64>,
}

/// Full outcome of a recovery run.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    /// Gradient steps actually taken.
    pub iterations_run: usize,
    pub final_x: DMatrix<f64>,
    pub traces: Vec<TraceRecord>,
    /// Distance-threshold verdict when ground truth was supplied, otherwise
    /// whether the gradient tolerance was reached.
    pub success: bool,
    pub wall_seconds: f64,
    /// Initialization produced `X_0 = 0` against nonzero measurements, so
    /// gradient descent could not move.
    pub degenerate_init: bool,
    /// The iterates left the finite range; `final_x` is the last finite one.
    pub diverged: bool,
    pub init: InitResult,
    /// Spectrum estimates frozen at initialization (exact when ground truth
    /// was supplied).
    pub sigma_r_sq_est: f64,
    pub frob_sq_est: f64,
    pub kappa_est: f64,
    /// Final `dist / ||X_true||_F` when ground truth was supplied.
    pub final_rel_dist: Option<f64>,
    /// Step size in effect at the last iteration.
    pub final_step_size: f64,
    pub seed: u64,
}

/// Precomputed step-size schedule: `pre` before `switch_at`, `post` after.
#[derive(Debug, Clone, Copy)]
struct StepSchedule {
    pre: f64,
    post: f64,
    switch_at: usize,
}

impl StepSchedule {
    fn at(&self, t: usize) -> f64 {
        if t < self.switch_at {
            self.pre
        } else {
            self.post
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SpectrumEstimates {
    sigma_r_sq: f64,
    frob_sq: f64,
    kappa: f64,
}

fn estimates_from(gt: Option<&GroundTruth>, init: &InitResult) -> SpectrumEstimates {
    match gt {
        Some(g) => SpectrumEstimates {
            sigma_r_sq: g.sigma_r_sq(),
            frob_sq: g.frob_sq(),
            kappa: g.kappa(),
        },
        None => {
            let first = init.lambda0.first().copied().unwrap_or(0.0);
            let last = init.lambda0.last().copied().unwrap_or(0.0);
            SpectrumEstimates {
                sigma_r_sq: last,
                frob_sq: 2.0 * init.lambda,
                kappa: if last > 0.0 {
                    first / last
                } else {
                    f64::INFINITY
                },
            }
        }
    }
}

fn schedule_from(
    rule: &StepRule,
    est: &SpectrumEstimates,
    n: usize,
    r: usize,
) -> Result<StepSchedule> {
    match rule {
        // The fixed rule never consults the spectrum estimates, so a blind
        // run with a collapsed estimate can still proceed.
        StepRule::Fixed { mu } => {
            if !(*mu > 0.0) {
                return Err(Error::invalid("fixed step size must be positive"));
            }
            Ok(StepSchedule {
                pre: *mu,
                post: *mu,
                switch_at: 0,
            })
        }
        StepRule::Theorem1 { .. } => {
            let mu = step_size(rule, est.sigma_r_sq, est.frob_sq, n, r, est.kappa)?;
            Ok(StepSchedule {
                pre: mu,
                post: mu,
                switch_at: 0,
            })
        }
        StepRule::Corollary { c6, .. } => {
            // Conservative phase first, relaxed step afterwards.
            let pre = step_size(
                &StepRule::theorem1(),
                est.sigma_r_sq,
                est.frob_sq,
                n,
                r,
                est.kappa,
            )?;
            let post = step_size(rule, est.sigma_r_sq, est.frob_sq, n, r, est.kappa)?;
            Ok(StepSchedule {
                pre,
                post,
                switch_at: corollary_switch_iteration(*c6, est.kappa, r, n),
            })
        }
    }
}

/// Raw loop output, including iterate snapshots at recorded iterations.
struct GdOutcome {
    iterations_run: usize,
    final_x: DMatrix<f64>,
    traces: Vec<TraceRecord>,
    snapshots: Vec<(usize, DMatrix<f64>)>,
    stopped_on_grad: bool,
    diverged: bool,
    final_rel_dist: Option<f64>,
    final_step_size: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_gd_loop(
    cfg: &RecoveryConfig,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    gt: Option<&GroundTruth>,
    x0: DMatrix<f64>,
    schedule: StepSchedule,
    forced_iters: Option<usize>,
    skip: Option<usize>,
) -> Result<GdOutcome> {
    let gt_factor = match gt {
        Some(g) => Some(Factor::new(g.factor().clone())?),
        None => None,
    };
    let gt_norm = gt.map(|g| g.factor().norm());
    let budget = forced_iters.unwrap_or(cfg.max_iters);

    let mut x = x0;
    let mut last_finite = x.clone();
    let mut traces = Vec::new();
    let mut snapshots = Vec::new();
    let mut t = 0_usize;
    let stopped_on_grad;
    let mut diverged = false;
    let mut final_rel_dist = None;
    let mut final_step_size;

    loop {
        let (grad, loss) = gradient_and_loss(&x, ens, y, skip)?;
        let grad_norm = grad.norm();
        let x_norm = x.norm();
        let rel_grad = if x_norm > 0.0 {
            grad_norm / x_norm
        } else if grad_norm == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let mu = schedule.at(t);
        final_step_size = mu;

        let should_record = t.is_multiple_of(cfg.trace_every);
        let grad_stop = forced_iters.is_none() && rel_grad <= cfg.stop_grad_tol;
        let out_of_budget = t >= budget;

        let need_dist = gt_factor.is_some()
            && (should_record || grad_stop || out_of_budget || cfg.stop_dist_tol.is_some());
        let dist = if need_dist {
            let xf = Factor::new(x.clone())?;
            Some(recovery_distance(&xf, gt_factor.as_ref().unwrap())?)
        } else {
            None
        };
        if let (Some(d), Some(norm)) = (dist, gt_norm) {
            final_rel_dist = Some(d / norm);
        }

        let dist_stop = forced_iters.is_none()
            && match (cfg.stop_dist_tol, dist, gt_norm) {
                (Some(tol), Some(d), Some(norm)) => d / norm <= tol,
                _ => false,
            };
        let stopping = grad_stop || dist_stop || out_of_budget;

        if should_record || stopping {
            let incoherence = if let Some(gtf) = gt_factor.as_ref() {
                let xf = Factor::new(x.clone())?;
                Some(incoherence_measure(&xf, gtf, ens)?)
            } else {
                None
            };
            traces.push(TraceRecord {
                t,
                loss,
                grad_norm,
                step_size: mu,
                dist,
                incoherence,
            });
            snapshots.push((t, x.clone()));
        }

        if stopping {
            stopped_on_grad = grad_stop;
            break;
        }

        x -= grad * mu;
        t += 1;

        // An oversized step on an undersampled instance can blow up; stop at
        // the last finite iterate instead of propagating NaNs.
        if !x.iter().all(|v| v.is_finite()) {
            stopped_on_grad = false;
            diverged = true;
            x = last_finite;
            break;
        }
        last_finite = x.clone();
    }

    Ok(GdOutcome {
        iterations_run: t,
        final_x: x,
        traces,
        snapshots,
        stopped_on_grad,
        diverged,
        final_rel_dist,
        final_step_size,
    })
}

fn build_report(
    cfg: &RecoveryConfig,
    outcome: GdOutcome,
    init: InitResult,
    est: SpectrumEstimates,
    gt: Option<&GroundTruth>,
    degenerate_init: bool,
    started: Instant,
) -> RecoveryReport {
    let success = if degenerate_init || outcome.diverged {
        false
    } else if gt.is_some() {
        let threshold = cfg.stop_dist_tol.unwrap_or(DEFAULT_SUCCESS_REL_DIST);
        outcome.final_rel_dist.is_some_and(|d| d <= threshold)
    } else {
        outcome.stopped_on_grad
    };
    RecoveryReport {
        iterations_run: outcome.iterations_run,
        final_x: outcome.final_x,
        traces: outcome.traces,
        success,
        wall_seconds: started.elapsed().as_secs_f64(),
        degenerate_init,
        diverged: outcome.diverged,
        init,
        sigma_r_sq_est: est.sigma_r_sq,
        frob_sq_est: est.frob_sq,
        kappa_est: est.kappa,
        final_rel_dist: outcome.final_rel_dist,
        final_step_size: outcome.final_step_size,
        seed: cfg.seed,
    }
}

/// Spectral initialization followed by gradient descent.
///
/// With a ground truth the report tracks distance and incoherence and the
/// success verdict is the relative-distance threshold; without one, only loss
/// and gradient traces are recorded and success means the gradient tolerance
/// was reached. Degenerate initialization (`X_0 = 0` against nonzero
/// measurements) is reported as a failed run, not an error.
pub fn run_recovery(
    cfg: &RecoveryConfig,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    gt: Option<&GroundTruth>,
) -> Result<RecoveryReport> {
    let started = Instant::now();
    cfg.validate()?;
    let init = spectral_init_capped(ens, y, cfg.rank, cfg.init_dim_cap, None)?;
    run_from_init(cfg, ens, y, gt, init, started)
}

/// Runs the gradient loop from a caller-supplied starting point instead of
/// the spectral initializer. Spectrum estimates still come from the ground
/// truth when supplied, otherwise from the starting factor itself.
pub fn run_recovery_from(
    cfg: &RecoveryConfig,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    gt: Option<&GroundTruth>,
    x0: Factor,
) -> Result<RecoveryReport> {
    let started = Instant::now();
    cfg.validate()?;
    y.check_bound_to(ens)?;
    if x0.n() != ens.n() || x0.rank() != cfg.rank {
        return Err(Error::invalid(format!(
            "starting factor is {}x{}, expected {}x{}",
            x0.n(),
            x0.rank(),
            ens.n(),
            cfg.rank
        )));
    }

    let est = match gt {
        Some(g) => SpectrumEstimates {
            sigma_r_sq: g.sigma_r_sq(),
            frob_sq: g.frob_sq(),
            kappa: g.kappa(),
        },
        None => {
            let sv = crate::model::singular_values_of(x0.matrix())?;
            let first = sv.first().copied().unwrap_or(0.0);
            let last = sv.last().copied().unwrap_or(0.0);
            SpectrumEstimates {
                sigma_r_sq: last * last,
                frob_sq: x0.matrix().norm_squared(),
                kappa: if last > 0.0 {
                    (first / last).powi(2)
                } else {
                    f64::INFINITY
                },
            }
        }
    };
    let placeholder_init = InitResult {
        x0: x0.matrix().clone(),
        eigvals: Vec::new(),
        lambda: 0.0,
        lambda0: Vec::new(),
        clamped: 0,
    };
    let schedule = schedule_from(&cfg.step_rule, &est, ens.n(), cfg.rank)?;
    let outcome = run_gd_loop(cfg, ens, y, gt, x0.into_matrix(), schedule, None, None)?;
    Ok(build_report(
        cfg,
        outcome,
        placeholder_init,
        est,
        gt,
        false,
        started,
    ))
}

fn degenerate_report(
    cfg: &RecoveryConfig,
    init: InitResult,
    est: SpectrumEstimates,
    gt: Option<&GroundTruth>,
    started: Instant,
) -> RecoveryReport {
    let outcome = GdOutcome {
        iterations_run: 0,
        final_x: init.x0.clone(),
        traces: Vec::new(),
        snapshots: Vec::new(),
        stopped_on_grad: false,
        diverged: false,
        final_rel_dist: gt.map(|g| {
            let xf = Factor::new(init.x0.clone()).expect("finite init");
            let tf = Factor::new(g.factor().clone()).expect("finite truth");
            recovery_distance(&xf, &tf).expect("distance") / g.factor().norm()
        }),
        final_step_size: 0.0,
    };
    build_report(cfg, outcome, init, est, gt, true, started)
}

fn run_from_init(
    cfg: &RecoveryConfig,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    gt: Option<&GroundTruth>,
    init: InitResult,
    started: Instant,
) -> Result<RecoveryReport> {
    let est = estimates_from(gt, &init);
    let x0_is_zero = init.lambda0.iter().all(|v| *v == 0.0);
    let y_is_zero = y.values().iter().all(|v| *v == 0.0);

    if x0_is_zero && !y_is_zero {
        // Gradient descent cannot leave X = 0; report failure.
        return Ok(degenerate_report(cfg, init, est, gt, started));
    }

    let schedule = if y_is_zero {
        // X_0 = 0 is already exact; take no steps regardless of rule.
        StepSchedule {
            pre: 1.0,
            post: 1.0,
            switch_at: 0,
        }
    } else {
        match schedule_from(&cfg.step_rule, &est, ens.n(), cfg.rank) {
            Ok(s) => s,
            // Blind spectrum estimates can collapse (a clamped trailing
            // eigenvalue); that is a failed run, not a caller error.
            Err(Error::InvalidInput(_)) if gt.is_none() => {
                return Ok(degenerate_report(cfg, init, est, gt, started));
            }
            Err(e) => return Err(e),
        }
    };

    let outcome = run_gd_loop(cfg, ens, y, gt, init.x0.clone(), schedule, None, None)?;
    Ok(build_report(cfg, outcome, init, est, gt, false, started))
}

/// Which leave-one-out trajectories to run.
#[derive(Debug, Clone)]
pub enum LooSelection {
    All,
    Indices(Vec<usize>),
}

/// One auxiliary trajectory's record.
#[derive(Debug, Clone)]
pub struct LooTrajectory {
    /// Index of the measurement left out.
    pub index: usize,
    /// Final iterate of the auxiliary run.
    pub final_factor: DMatrix<f64>,
    /// `||X_t Q_t - X_t^{(l)} R_t^{(l)}||_F` at each recorded iteration.
    pub proximity: Vec<f64>,
}

/// Outcome of the leave-one-out diagnostic.
#[derive(Debug, Clone)]
pub struct LooReport {
    /// The main (full-data) run.
    pub main: RecoveryReport,
    /// Recorded iteration indices shared by all proximity traces.
    pub recorded_iters: Vec<usize>,
    /// `max_l` proximity per recorded iteration.
    pub max_proximity: Vec<f64>,
    pub trajectories: Vec<LooTrajectory>,
}

/// Runs the auxiliary leave-one-out trajectories: for each selected `l`, the
/// initializer and every gradient are rebuilt from the `m - 1` retained
/// measurements (normalizations kept at `1/2m` and `1/m`), using the same
/// step-size schedule and iteration count as the main run. Proximity is
/// measured after aligning the main iterate to the truth (`Q_t`) and the
/// auxiliary iterate to the aligned main iterate (`R_t^{(l)}`).
///
/// Trajectories never read the left-out pair `(a_l, y_l)`, which is what
/// makes them statistically independent diagnostics.
pub fn run_leave_one_out(
    cfg: &RecoveryConfig,
    ens: &SensingEnsemble,
    y: &MeasurementSet,
    gt: &GroundTruth,
    which: &LooSelection,
) -> Result<LooReport> {
    let started = Instant::now();
    cfg.validate()?;
    let indices: Vec<usize> = match which {
        LooSelection::All => (0..ens.m()).collect(),
        LooSelection::Indices(list) => {
            for &l in list {
                if l >= ens.m() {
                    return Err(Error::invalid(format!(
                        "leave-one-out index {l} out of range for m={}",
                        ens.m()
                    )));
                }
            }
            list.clone()
        }
    };

    // Main run, keeping snapshots for alignment.
    let init = spectral_init_capped(ens, y, cfg.rank, cfg.init_dim_cap, None)?;
    let est = estimates_from(Some(gt), &init);
    let schedule = schedule_from(&cfg.step_rule, &est, ens.n(), cfg.rank)?;
    let main_outcome = run_gd_loop(cfg, ens, y, Some(gt), init.x0.clone(), schedule, None, None)?;
    let total_iters = main_outcome.iterations_run;

    // Aligned main snapshots X_t Q_t.
    let truth = Factor::new(gt.factor().clone())?;
    let mut aligned: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(main_outcome.snapshots.len());
    for (t, x) in &main_outcome.snapshots {
        let xf = Factor::new(x.clone())?;
        let q = procrustes_align(&xf, &truth)?;
        aligned.push((*t, x * q.q()));
    }
    let recorded_iters: Vec<usize> = aligned.iter().map(|(t, _)| *t).collect();

    let trajectories: Vec<Result<LooTrajectory>> = indices
        .par_iter()
        .map(|&l| {
            let loo_init = spectral_init_capped(ens, y, cfg.rank, cfg.init_dim_cap, Some(l))?;
            let outcome = run_gd_loop(
                cfg,
                ens,
                y,
                None,
                loo_init.x0,
                schedule,
                Some(total_iters),
                Some(l),
            )?;
            let mut proximity = Vec::with_capacity(aligned.len());
            for ((t, main_x), (t_loo, loo_x)) in aligned.iter().zip(&outcome.snapshots) {
                debug_assert_eq!(t, t_loo);
                let loo_f = Factor::new(loo_x.clone())?;
                let main_f = Factor::new(main_x.clone())?;
                proximity.push(procrustes_align(&loo_f, &main_f)?.residual());
            }
            Ok(LooTrajectory {
                index: l,
                final_factor: outcome.final_x,
                proximity,
            })
        })
        .collect();
    let trajectories: Vec<LooTrajectory> = trajectories.into_iter().collect::<Result<Vec<_>>>()?;

    let max_proximity: Vec<f64> = (0..recorded_iters.len())
        .map(|k| {
            trajectories
                .iter()
                .filter_map(|tr| tr.proximity.get(k).copied())
                .fold(0.0_f64, f64::max)
        })
        .collect();

    let mut main = build_report(cfg, main_outcome, init, est, Some(gt), false, started);
    main.wall_seconds = started.elapsed().as_secs_f64();
    Ok(LooReport {
        main,
        recorded_iters,
        max_proximity,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_ground_truth, measure, sample_sensing_ensemble};

    #[test]
    fn step_size_formulas() {
        // theorem1: c4=1, r=1, kappa=1, ln n = 3, sigma_r^2 = 1 -> 1/16.
        let n = (std::f64::consts::E.powi(3)).round() as usize; // ln(20) ~ 3
                                                                // Use an exact ln: pick n with ln n == 3 unavailable; instead check
                                                                // the formula algebraically with n = e^3 rounded and recompute.
        let mu = step_size(&StepRule::Theorem1 { c4: 1.0 }, 1.0, 1.0, n, 1, 1.0).unwrap();
        let expected = 1.0 / (1.0 + (n as f64).ln()).powi(2);
        assert!((mu - expected).abs() < 1e-15);

        // corollary: c7=1, r=2, kappa=1, sigma_r^2 = 4 -> 1/16.
        let mu = step_size(
            &StepRule::Corollary { c6: 1.0, c7: 1.0 },
            4.0,
            8.0,
            32,
            2,
            1.0,
        )
        .unwrap();
        assert!((mu - 1.0 / 16.0).abs() < 1e-15);

        // Relaxed rate beats the log-dependent one for large n at r=1, kappa=1.
        let big_n = 100_000;
        let t1 = step_size(&StepRule::theorem1(), 1.0, 1.0, big_n, 1, 1.0).unwrap();
        let co = step_size(&StepRule::corollary(), 1.0, 1.0, big_n, 1, 1.0).unwrap();
        assert!(co > t1);

        assert!(step_size(&StepRule::theorem1(), 0.0, 1.0, 4, 1, 1.0).is_err());
        assert!(step_size(&StepRule::theorem1(), 1.0, -1.0, 4, 1, 1.0).is_err());
    }

    #[test]
    fn theorem1_quarter_case() {
        // With r*kappa = 1 and ln n contributing 3, mu = 1/16. Build the
        // denominator directly to pin the arithmetic.
        let mu = 1.0 / ((1.0_f64 * 1.0 + 3.0).powi(2) * 1.0);
        assert_eq!(mu, 1.0 / 16.0);
    }

    #[test]
    fn zero_measurements_init_is_degenerate_but_exact() {
        let ens = sample_sensing_ensemble(10, 4, 5).unwrap();
        let zero = DMatrix::<f64>::zeros(4, 1);
        let y = crate::model::measure_factor(&zero, &ens).unwrap();
        let init = spectral_init(&ens, &y, 1).unwrap();
        assert_eq!(init.lambda, 0.0);
        assert_eq!(init.clamped, 1);
        assert!(init.x0.amax() == 0.0);
        assert!(init.eigvals.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn init_rejects_oversized_rank_and_dimension() {
        let ens = sample_sensing_ensemble(6, 4, 5).unwrap();
        let gt = generate_ground_truth(4, 1, &[1.0], 6).unwrap();
        let y = measure(&gt, &ens).unwrap();
        assert!(spectral_init(&ens, &y, 5).is_err());
        assert!(spectral_init_capped(&ens, &y, 1, 3, None).is_err());
    }

    #[test]
    fn gd_step_fixed_point_and_scalar_case() {
        let gt = generate_ground_truth(5, 2, &[1.0, 0.7], 8).unwrap();
        let ens = sample_sensing_ensemble(30, 5, 9).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = Factor::new(gt.factor().clone()).unwrap();
        let stepped = gd_step(&x, 0.3, &ens, &y).unwrap();
        assert!(
            (stepped.matrix() - gt.factor()).amax() <= 1e-14 * gt.factor().amax(),
            "truth should be a fixed point"
        );

        // Scalar case: X=1, mu=0.1, gradient -3 (from the objective module's
        // hand case) -> X' = 1.3.
        let ens1 = crate::model::SensingEnsemble::from_vectors(&[[1.0, 0.0]], 0).unwrap();
        let planted = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        let y1 = crate::model::measure_factor(&planted, &ens1).unwrap();
        let x1 = Factor::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let next = gd_step(&x1, 0.1, &ens1, &y1).unwrap();
        assert!((next.matrix()[(0, 0)] - 1.3).abs() < 1e-14);

        assert!(gd_step(&x1, 0.0, &ens1, &y1).is_err());
    }

    #[test]
    fn gd_step_is_rotation_equivariant() {
        let gt = generate_ground_truth(6, 2, &[1.0, 0.6], 14).unwrap();
        let ens = sample_sensing_ensemble(36, 6, 15).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let x = DMatrix::from_fn(6, 2, |i, j| 0.4 * (i as f64 + 1.0) - 0.7 * j as f64);
        // A fixed rotation.
        let (c, s) = (0.7_f64.cos(), 0.7_f64.sin());
        let p = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);

        let stepped = gd_step(&Factor::new(x.clone()).unwrap(), 0.05, &ens, &y).unwrap();
        let stepped_rot = gd_step(&Factor::new(&x * &p).unwrap(), 0.05, &ens, &y).unwrap();
        let gap = (stepped.matrix() * &p - stepped_rot.matrix()).amax();
        assert!(gap <= 1e-12, "equivariance gap {gap:e}");
    }

    #[test]
    fn small_fixed_step_keeps_loss_nonincreasing() {
        let gt = generate_ground_truth(12, 1, &[1.0], 16).unwrap();
        let ens = sample_sensing_ensemble(120, 12, 17).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let mut cfg = RecoveryConfig::for_rank(1);
        cfg.max_iters = 150;
        cfg.trace_every = 10;
        cfg.step_rule = StepRule::Fixed { mu: 0.02 };
        let report = run_recovery(&cfg, &ens, &y, Some(&gt)).unwrap();
        assert!((report.final_step_size - 0.02).abs() < 1e-15);
        for w in report.traces.windows(2) {
            assert!(
                w[1].loss <= w[0].loss * (1.0 + 1e-12),
                "loss increased under a stable fixed step: {} -> {}",
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn start_at_truth_exits_immediately() {
        let gt = generate_ground_truth(6, 1, &[1.0], 10).unwrap();
        let ens = sample_sensing_ensemble(40, 6, 11).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let mut cfg = RecoveryConfig::for_rank(1);
        cfg.max_iters = 50;
        let report = run_recovery_from(
            &cfg,
            &ens,
            &y,
            Some(&gt),
            Factor::new(gt.factor().clone()).unwrap(),
        )
        .unwrap();
        assert_eq!(report.iterations_run, 0);
        assert!(report.traces[0].grad_norm <= 1e-12);
    }

    #[test]
    fn blind_run_reports_grad_based_success() {
        let gt = generate_ground_truth(8, 1, &[1.0], 20).unwrap();
        let ens = sample_sensing_ensemble(96, 8, 21).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let mut cfg = RecoveryConfig::for_rank(1);
        cfg.max_iters = 3000;
        cfg.stop_grad_tol = 1e-9;
        cfg.trace_every = 100;
        let report = run_recovery(&cfg, &ens, &y, None).unwrap();
        assert!(report.success, "grad tolerance should be reachable");
        assert!(report.traces.iter().all(|r| r.dist.is_none()));
        assert!(report.final_rel_dist.is_none());
    }

    #[test]
    fn degenerate_init_is_failure_not_error() {
        // All-zero measurements against a nonzero truth cannot happen, so
        // fabricate a nonzero y with a zero init: y has one tiny positive
        // entry but the shift absorbs the spectrum at r = n (every shifted
        // eigenvalue is <= 0 except possibly the top).
        let ens = sample_sensing_ensemble(3, 2, 33).unwrap();
        let planted = DMatrix::from_column_slice(2, 1, &[1e-3, 0.0]);
        let y = crate::model::measure_factor(&planted, &ens).unwrap();
        // Rank 2 request: the second shifted eigenvalue is typically clamped;
        // if not, the run simply proceeds, so only assert on the zero case.
        let cfg = RecoveryConfig::for_rank(2);
        let report = run_recovery(&cfg, &ens, &y, None).unwrap();
        if report.degenerate_init {
            assert!(!report.success);
            assert_eq!(report.iterations_run, 0);
        }
    }

    #[test]
    fn loo_single_measurement_trajectory_is_constant() {
        let gt = generate_ground_truth(3, 1, &[1.0], 40).unwrap();
        let ens = sample_sensing_ensemble(1, 3, 41).unwrap();
        let y = measure(&gt, &ens).unwrap();
        let mut cfg = RecoveryConfig::for_rank(1);
        cfg.max_iters = 5;
        cfg.stop_dist_tol = None;
        let report = run_leave_one_out(&cfg, &ens, &y, &gt, &LooSelection::All).unwrap();
        assert_eq!(report.trajectories.len(), 1);
        // Y^{(1)} = 0 so the trajectory starts and stays at zero.
        assert_eq!(report.trajectories[0].final_factor.amax(), 0.0);
        assert!(run_leave_one_out(&cfg, &ens, &y, &gt, &LooSelection::Indices(vec![1])).is_err());
    }
}
