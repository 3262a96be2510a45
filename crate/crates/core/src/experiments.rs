//! Reproducible experiment harness: convergence traces, phase-transition
//! sweeps, leave-one-out diagnostics, the covariance-sketching demo, and a
//! deterministic self-test.
//!
//! Output conventions: tables are RFC-4180 CSV ('.' decimal, LF line endings)
//! and run metadata is a separate JSON document embedding the generator id,
//! the base seed, and the library version. Wall-clock timings are reported in
//! the returned structs but never serialized, so all emitted bytes are
//! reproducible for fixed inputs within one build. Trials parallelize across
//! a worker pool (capped by the `R1FM_THREADS` environment variable) with
//! per-trial derived seeds; serial and parallel sweeps emit identical tables.

use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{
    covariance_sketch, generate_ground_truth, measure, sample_covariance_stream,
    sample_sensing_ensemble, GroundTruth, MeasurementSet, SensingEnsemble, GENERATOR_ID,
};
use crate::solver::{run_leave_one_out, run_recovery, LooSelection, RecoveryConfig, StepRule};

/// Library version embedded in every metadata document.
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Salt separating the sensing-ensemble seed stream from the ground-truth
/// stream inside one trial.
const ENS_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
/// Salt for the covariance data stream.
const STREAM_SEED_SALT: u64 = 0xd1b5_4a32_d192_ed03;
/// Salt for leave-one-out subset selection.
const SUBSET_SEED_SALT: u64 = 0x8bb8_4b93_962e_acc9;

/// A finished experiment: one CSV table plus one metadata document.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub csv: String,
    pub metadata: serde_json::Value,
    /// Wall-clock duration; informational only, never serialized.
    pub wall_seconds: f64,
}

/// Resolves the worker count: explicit argument, else `R1FM_THREADS`, else
/// available parallelism.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .filter(|w| *w > 0)
        .or_else(|| {
            std::env::var("R1FM_THREADS")
                .ok()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .filter(|w| *w > 0)
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("failed to build worker pool: {e}")))
}

/// Deterministic float formatting for CSV cells (shortest round-trip form).
fn cell(v: f64) -> String {
    format!("{v}")
}

fn base_metadata(experiment: &str, base_seed: u64) -> serde_json::Map<String, serde_json::Value> {
    let mut map = serde_json::Map::new();
    map.insert("experiment".into(), json!(experiment));
    map.insert("generator_id".into(), json!(GENERATOR_ID));
    map.insert("base_seed".into(), json!(base_seed));
    map.insert("library_version".into(), json!(LIBRARY_VERSION));
    map
}

fn instance(
    n: usize,
    r: usize,
    m: usize,
    seed: u64,
) -> Result<(GroundTruth, SensingEnsemble, MeasurementSet)> {
    let sigma = vec![1.0; r];
    let gt = generate_ground_truth(n, r, &sigma, seed)?;
    let ens = sample_sensing_ensemble(m, n, seed ^ ENS_SEED_SALT)?;
    let y = measure(&gt, &ens)?;
    Ok((gt, ens, y))
}

// ---------------------------------------------------------------------------
// Convergence traces
// ---------------------------------------------------------------------------

/// One fully traced recovery on a planted instance with unit spectrum.
/// Emits rows `(t, loss, dist, incoherence, step_size)`.
pub fn convergence_experiment(
    n: usize,
    r: usize,
    m: usize,
    step_rule: StepRule,
    iters: usize,
    seed: u64,
) -> Result<ExperimentOutput> {
    let started = Instant::now();
    let (gt, ens, y) = instance(n, r, m, seed)?;
    let mut cfg = RecoveryConfig::for_rank(r);
    cfg.max_iters = iters;
    cfg.step_rule = step_rule.clone();
    cfg.trace_every = 1;
    cfg.seed = seed;
    let report = run_recovery(&cfg, &ens, &y, Some(&gt))?;

    let mut csv = String::from("t,loss,dist,incoherence,step_size\n");
    for row in &report.traces {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.t,
            cell(row.loss),
            cell(row.dist.unwrap_or(f64::NAN)),
            cell(row.incoherence.unwrap_or(f64::NAN)),
            cell(row.step_size),
        ));
    }

    let mut meta = base_metadata("converge", seed);
    meta.insert("n".into(), json!(n));
    meta.insert("r".into(), json!(r));
    meta.insert("m".into(), json!(m));
    meta.insert("iters".into(), json!(iters));
    meta.insert("step_rule".into(), json!(format!("{step_rule:?}")));
    meta.insert("iterations_run".into(), json!(report.iterations_run));
    meta.insert("success".into(), json!(report.success));

    Ok(ExperimentOutput {
        csv,
        metadata: serde_json::Value::Object(meta),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Phase transition sweep
// ---------------------------------------------------------------------------

/// Grid of problem sizes for the success-rate sweep.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub n_list: Vec<usize>,
    pub r_list: Vec<usize>,
    /// Measurement counts, or multipliers of `n` when `m_over_n` is set.
    pub m_list: Vec<usize>,
    pub m_over_n: bool,
    pub trials: usize,
    /// Relative-distance threshold declaring one trial successful.
    pub success_threshold: f64,
    pub base_seed: u64,
    /// Gradient-step budget per trial.
    pub max_iters: usize,
}

impl PhaseGrid {
    pub fn new(n_list: Vec<usize>, r_list: Vec<usize>, m_list: Vec<usize>) -> Self {
        Self {
            n_list,
            r_list,
            m_list,
            m_over_n: false,
            trials: 50,
            success_threshold: 1e-5,
            base_seed: 0,
            max_iters: 2000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.r_list.is_empty() || self.m_list.is_empty() {
            return Err(Error::invalid("phase grid lists must be nonempty"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("phase grid needs trials >= 1"));
        }
        if self.trials >= 1_000_000 {
            return Err(Error::invalid(
                "trial seeds are derived as cell_index*10^6 + trial; trials must stay below 10^6",
            ));
        }
        if !(self.success_threshold > 0.0) {
            return Err(Error::invalid("success threshold must be positive"));
        }
        Ok(())
    }
}

/// Aggregated outcome of one grid cell.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub cell_index: usize,
    pub n: usize,
    pub r: usize,
    pub m: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_rel_dist: f64,
    pub median_iterations: f64,
    /// Informational only; excluded from the CSV to keep it reproducible.
    pub median_wall_seconds: f64,
    pub base_seed: u64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

struct TrialOutcome {
    success: bool,
    rel_dist: f64,
    iterations: f64,
    wall: f64,
}

/// Runs `trials` independent seeded recoveries per `(n, r, m)` cell and
/// aggregates success rates. Trial seeds are
/// `base_seed XOR (cell_index * 10^6 + trial)`. A failed trial counts as a
/// non-success and never aborts the sweep.
pub fn phase_transition_experiment(
    grid: &PhaseGrid,
    workers: Option<usize>,
) -> Result<(Vec<ExperimentRecord>, ExperimentOutput)> {
    let started = Instant::now();
    grid.validate()?;

    struct Cell {
        index: usize,
        n: usize,
        r: usize,
        m: usize,
    }
    let mut cells = Vec::new();
    let mut index = 0;
    for &n in &grid.n_list {
        for &r in &grid.r_list {
            for &m_raw in &grid.m_list {
                let m = if grid.m_over_n { m_raw * n } else { m_raw };
                cells.push(Cell { index, n, r, m });
                index += 1;
            }
        }
    }

    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|c| (0..grid.trials).map(move |t| (c.index, t)))
        .collect();

    let pool = worker_pool(resolve_workers(workers))?;
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell_index, trial)| {
                let c = &cells[cell_index];
                let trial_seed = grid.base_seed ^ (cell_index as u64 * 1_000_000 + trial as u64);
                let trial_started = Instant::now();
                let result = (|| -> Result<TrialOutcome> {
                    let (gt, ens, y) = instance(c.n, c.r, c.m, trial_seed)?;
                    let mut cfg = RecoveryConfig::for_rank(c.r);
                    cfg.max_iters = grid.max_iters;
                    cfg.stop_dist_tol = Some(grid.success_threshold);
                    cfg.trace_every = grid.max_iters.max(1);
                    cfg.seed = trial_seed;
                    let report = run_recovery(&cfg, &ens, &y, Some(&gt))?;
                    Ok(TrialOutcome {
                        success: report.success,
                        rel_dist: report.final_rel_dist.unwrap_or(f64::INFINITY),
                        iterations: report.iterations_run as f64,
                        wall: trial_started.elapsed().as_secs_f64(),
                    })
                })();
                result.unwrap_or(TrialOutcome {
                    success: false,
                    rel_dist: f64::INFINITY,
                    iterations: 0.0,
                    wall: trial_started.elapsed().as_secs_f64(),
                })
            })
            .collect()
    });

    let mut records = Vec::with_capacity(cells.len());
    for c in &cells {
        let slice = &outcomes[c.index * grid.trials..(c.index + 1) * grid.trials];
        let successes = slice.iter().filter(|o| o.success).count();
        let mut dists: Vec<f64> = slice.iter().map(|o| o.rel_dist).collect();
        let mut iters: Vec<f64> = slice.iter().map(|o| o.iterations).collect();
        let mut walls: Vec<f64> = slice.iter().map(|o| o.wall).collect();
        records.push(ExperimentRecord {
            cell_index: c.index,
            n: c.n,
            r: c.r,
            m: c.m,
            trials: grid.trials,
            successes,
            success_rate: successes as f64 / grid.trials as f64,
            median_rel_dist: median(&mut dists),
            median_iterations: median(&mut iters),
            median_wall_seconds: median(&mut walls),
            base_seed: grid.base_seed,
        });
    }

    let mut csv = String::from(
        "cell_index,n,r,m,trials,successes,success_rate,median_rel_dist,median_iterations,base_seed\n",
    );
    for rec in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            rec.cell_index,
            rec.n,
            rec.r,
            rec.m,
            rec.trials,
            rec.successes,
            cell(rec.success_rate),
            cell(rec.median_rel_dist),
            cell(rec.median_iterations),
            rec.base_seed,
        ));
    }

    let mut meta = base_metadata("phase", grid.base_seed);
    meta.insert("n_list".into(), json!(grid.n_list));
    meta.insert("r_list".into(), json!(grid.r_list));
    meta.insert("m_list".into(), json!(grid.m_list));
    meta.insert("m_over_n".into(), json!(grid.m_over_n));
    meta.insert("trials".into(), json!(grid.trials));
    meta.insert("success_threshold".into(), json!(grid.success_threshold));
    meta.insert("max_iters".into(), json!(grid.max_iters));
    meta.insert(
        "seed_derivation".into(),
        json!("trial_seed = base_seed XOR (cell_index*10^6 + trial)"),
    );

    let output = ExperimentOutput {
        csv,
        metadata: serde_json::Value::Object(meta),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((records, output))
}

// ---------------------------------------------------------------------------
// Leave-one-out diagnostics
// ---------------------------------------------------------------------------

/// Runs the leave-one-out diagnostic on a random size-`subset_size` index
/// subset and tabulates `(t, max_proximity, dist, incoherence)` per recorded
/// iteration. With an empty subset only `(t, dist, incoherence)` is emitted.
pub fn loo_diagnostic_experiment(
    n: usize,
    r: usize,
    m: usize,
    iters: usize,
    subset_size: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<ExperimentOutput> {
    let started = Instant::now();
    if subset_size > m {
        return Err(Error::invalid(format!(
            "subset_size {subset_size} exceeds m={m}"
        )));
    }
    let (gt, ens, y) = instance(n, r, m, seed)?;

    let indices: Vec<usize> = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ SUBSET_SEED_SALT);
        let mut picked = rand::seq::index::sample(&mut rng, m, subset_size).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut cfg = RecoveryConfig::for_rank(r);
    cfg.max_iters = iters;
    cfg.trace_every = (iters / 40).max(1);
    cfg.seed = seed;

    let pool = worker_pool(resolve_workers(workers))?;
    let report = pool.install(|| {
        run_leave_one_out(&cfg, &ens, &y, &gt, &LooSelection::Indices(indices.clone()))
    })?;

    let with_proximity = !indices.is_empty();
    let mut csv = String::from(if with_proximity {
        "t,max_proximity,dist,incoherence\n"
    } else {
        "t,dist,incoherence\n"
    });
    for (k, row) in report.main.traces.iter().enumerate() {
        if with_proximity {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.t,
                cell(report.max_proximity[k]),
                cell(row.dist.unwrap_or(f64::NAN)),
                cell(row.incoherence.unwrap_or(f64::NAN)),
            ));
        } else {
            csv.push_str(&format!(
                "{},{},{}\n",
                row.t,
                cell(row.dist.unwrap_or(f64::NAN)),
                cell(row.incoherence.unwrap_or(f64::NAN)),
            ));
        }
    }

    let mut meta = base_metadata("loo", seed);
    meta.insert("n".into(), json!(n));
    meta.insert("r".into(), json!(r));
    meta.insert("m".into(), json!(m));
    meta.insert("iters".into(), json!(iters));
    meta.insert("subset_size".into(), json!(subset_size));
    meta.insert("indices".into(), json!(indices));

    Ok(ExperimentOutput {
        csv,
        metadata: serde_json::Value::Object(meta),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Covariance sketching demo
// ---------------------------------------------------------------------------

/// Result of one covariance-sketch-and-recover pipeline.
#[derive(Debug, Clone)]
pub struct SketchReport {
    pub rel_m_error: f64,
    pub iterations_run: usize,
    /// Set when the stream was shorter than 100 samples.
    pub insufficient_stream: bool,
}

/// Draws a stream from `N(0, X X^T)`, sketches it, recovers, and reports the
/// relative Frobenius error of the recovered PSD matrix.
pub fn sketch_demo(
    n: usize,
    r: usize,
    m: usize,
    stream_length: usize,
    seed: u64,
) -> Result<(SketchReport, ExperimentOutput)> {
    let started = Instant::now();
    if stream_length == 0 {
        return Err(Error::EmptyInput("covariance sketch stream".into()));
    }
    let sigma = vec![1.0; r];
    let gt = generate_ground_truth(n, r, &sigma, seed)?;
    let ens = sample_sensing_ensemble(m, n, seed ^ ENS_SEED_SALT)?;
    let stream = sample_covariance_stream(&gt, stream_length, seed ^ STREAM_SEED_SALT);
    let y = covariance_sketch(&stream, &ens)?;

    let mut cfg = RecoveryConfig::for_rank(r);
    cfg.max_iters = 2000;
    cfg.trace_every = 2000;
    cfg.seed = seed;
    let report = run_recovery(&cfg, &ens, &y, Some(&gt))?;

    let truth_m = gt.factor() * gt.factor().transpose();
    let recovered_m = &report.final_x * report.final_x.transpose();
    let rel_m_error = (recovered_m - &truth_m).norm() / truth_m.norm();
    let insufficient_stream = stream_length < 100;

    let sketch = SketchReport {
        rel_m_error,
        iterations_run: report.iterations_run,
        insufficient_stream,
    };

    let mut csv =
        String::from("n,r,m,stream_length,rel_m_error,iterations_run,insufficient_stream\n");
    csv.push_str(&format!(
        "{},{},{},{},{},{},{}\n",
        n,
        r,
        m,
        stream_length,
        cell(rel_m_error),
        report.iterations_run,
        insufficient_stream,
    ));

    let mut meta = base_metadata("sketch", seed);
    meta.insert("n".into(), json!(n));
    meta.insert("r".into(), json!(r));
    meta.insert("m".into(), json!(m));
    meta.insert("stream_length".into(), json!(stream_length));
    if insufficient_stream {
        meta.insert(
            "warning".into(),
            json!("insufficient stream: fewer than 100 samples"),
        );
    }

    Ok((
        sketch,
        ExperimentOutput {
            csv,
            metadata: serde_json::Value::Object(meta),
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

// ---------------------------------------------------------------------------
// Self-test
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    failure: Option<String>,
}

fn check(name: &'static str, result: Result<Option<String>>) -> Check {
    let failure = match result {
        Ok(None) => None,
        Ok(Some(detail)) => Some(detail),
        Err(e) => Some(format!("error: {e}")),
    };
    Check { name, failure }
}

/// Runs the built-in oracle suites and returns a deterministic line-per-check
/// report plus the overall verdict.
pub fn selftest() -> Result<(String, bool)> {
    use crate::kernels::{svd_small, top_r_eigenpairs, SymmetricMatrix, DEFAULT_EIGEN_TOL};
    use crate::objective::{gradient, hessian_quadratic_form, loo_gradient, Direction, Factor};
    use crate::oracles;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut checks: Vec<Check> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_7e57);
    let gauss = |rng: &mut ChaCha8Rng, n: usize, r: usize| {
        DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    // Eigen pairs against the Jacobi sweep.
    checks.push(check("eigen_vs_jacobi", {
        let g = gauss(&mut rng, 8, 8);
        let s_mat = &g + g.transpose();
        let sym = SymmetricMatrix::new(s_mat.clone())?;
        let pairs = top_r_eigenpairs(&sym, 8, DEFAULT_EIGEN_TOL)?;
        let (jvals, _) = oracles::jacobi_eigen(&s_mat)?;
        let worst = pairs
            .values()
            .iter()
            .zip(&jvals)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        Ok((worst > 1e-9).then(|| format!("max eigenvalue gap {worst:e}")))
    }));

    // SVD singular values against eigenvalues of the Gram matrix.
    checks.push(check("svd_vs_gram_eigen", {
        let m3 = gauss(&mut rng, 3, 3);
        let svd = svd_small(&m3)?;
        let gram = m3.tr_mul(&m3);
        let sym = SymmetricMatrix::new(gram)?;
        let pairs = top_r_eigenpairs(&sym, 3, DEFAULT_EIGEN_TOL)?;
        let worst = svd
            .sigma
            .iter()
            .zip(pairs.values())
            .map(|(s, l)| (s - l.max(0.0).sqrt()).abs())
            .fold(0.0_f64, f64::max);
        Ok((worst > 1e-9).then(|| format!("max sigma gap {worst:e}")))
    }));

    // Analytic gradient against central differences.
    checks.push(check("gradient_vs_finite_difference", {
        let gt = generate_ground_truth(6, 2, &[1.4, 0.9], 101)?;
        let ens = sample_sensing_ensemble(20, 6, 102)?;
        let y = measure(&gt, &ens)?;
        let x = gauss(&mut rng, 6, 2) * 0.6;
        let g = gradient(&Factor::new(x.clone())?, &ens, &y)?;
        let fd = oracles::finite_difference_gradient(&x, &ens, &y, 1e-5)?;
        let rel = (&g - &fd).norm() / g.norm().max(1e-300);
        Ok((rel > 1e-6).then(|| format!("relative gap {rel:e}")))
    }));

    // Hessian quadratic form against the dense assembly and the naive loops.
    checks.push(check("hessian_vs_dense_and_naive", {
        let gt = generate_ground_truth(3, 2, &[1.0, 0.5], 103)?;
        let ens = sample_sensing_ensemble(5, 3, 104)?;
        let y = measure(&gt, &ens)?;
        let x = gauss(&mut rng, 3, 2);
        let v = gauss(&mut rng, 3, 2);
        let q = hessian_quadratic_form(
            &Factor::new(x.clone())?,
            &Direction::new(v.clone())?,
            &ens,
            &y,
        )?;
        let dense = oracles::hessian_dense(&x, &ens, &y)?;
        let q_dense = oracles::quadratic_form_dense(&dense, &v);
        let q_naive = oracles::hessian_quadratic_form_naive(&x, &v, &ens, &y)?;
        let scale = q.abs().max(1.0);
        let dense_gap = (q - q_dense).abs() / scale;
        let naive_gap = (q - q_naive).abs() / scale;
        Ok((dense_gap > 1e-10 || naive_gap > 1e-12)
            .then(|| format!("dense gap {dense_gap:e}, naive gap {naive_gap:e}")))
    }));

    // Population-limit initialization.
    checks.push(check("population_init_oracle", {
        let gt = generate_ground_truth(7, 2, &[1.3, 0.8], 105)?;
        let frob_sq = gt.factor().norm_squared();
        let pop = DMatrix::identity(7, 7) * (0.5 * frob_sq) + gt.factor() * gt.factor().transpose();
        let init = crate::solver::spectral_init_from_matrix(
            &SymmetricMatrix::new(pop)?,
            0.5 * frob_sq,
            2,
        )?;
        let got = &init.x0 * init.x0.transpose();
        let want = gt.factor() * gt.factor().transpose();
        let err = (got - want).norm();
        Ok((err > 1e-9 * frob_sq).then(|| format!("population gap {err:e}")))
    }));

    // Procrustes minimality against random candidates and the grid oracle.
    checks.push(check("procrustes_minimality", {
        let mut worst_violation = 0.0_f64;
        let mut grid_gap = 0.0_f64;
        for _ in 0..10 {
            let x = gauss(&mut rng, 5, 2);
            let t = gauss(&mut rng, 5, 2);
            let res = crate::alignment::procrustes_align(
                &Factor::new(x.clone())?,
                &Factor::new(t.clone())?,
            )?;
            for _ in 0..50 {
                let q = gauss(&mut rng, 2, 2).qr().q();
                let candidate = (&x * q - &t).norm();
                worst_violation = worst_violation.max(res.residual() - candidate);
            }
            let grid = oracles::procrustes_grid_residual_r2(&x, &t, 1e-3)?;
            grid_gap = grid_gap.max((grid - res.residual()).abs());
        }
        Ok((worst_violation > 1e-10 || grid_gap > 1e-4)
            .then(|| format!("violation {worst_violation:e}, grid gap {grid_gap:e}")))
    }));

    // Frobenius lower bound on factor distances.
    checks.push(check("psd_distance_lower_bound", {
        let coeff = (2.0 * (2.0_f64.sqrt() - 1.0)).sqrt();
        let mut violations = 0_usize;
        for _ in 0..200 {
            let x = gauss(&mut rng, 6, 2);
            let u = gauss(&mut rng, 6, 2);
            let lhs = (&x * x.transpose() - &u * u.transpose()).norm();
            let gram = x.tr_mul(&x);
            let sr = svd_small(&gram)?.sigma.last().copied().unwrap_or(0.0);
            let sigma_r = sr.max(0.0).sqrt();
            let dist = crate::alignment::recovery_distance(
                &Factor::new(x.clone())?,
                &Factor::new(u.clone())?,
            )?;
            if lhs + 1e-10 < coeff * sigma_r * dist {
                violations += 1;
            }
        }
        Ok((violations > 0).then(|| format!("{violations} violations")))
    }));

    // Leave-one-out gradient identity.
    checks.push(check("loo_gradient_identity", {
        let gt = generate_ground_truth(5, 2, &[1.1, 0.6], 106)?;
        let ens = sample_sensing_ensemble(8, 5, 107)?;
        let y = measure(&gt, &ens)?;
        let x = gauss(&mut rng, 5, 2) * 0.7;
        let xf = Factor::new(x.clone())?;
        let g = gradient(&xf, &ens, &y)?;
        let mut worst = 0.0_f64;
        for l in 0..8 {
            let gl = loo_gradient(&xf, &ens, &y, l)?;
            let a = ens.vector(l).clone_owned();
            let b = x.tr_mul(&a);
            let w = b.norm_squared() - y.values()[l];
            let dropped = &a * b.transpose() * w;
            worst = worst.max(((&g - &gl) * 8.0 - dropped).amax());
        }
        Ok((worst > 1e-12).then(|| format!("identity gap {worst:e}")))
    }));

    // Measurement invariance under right-orthonormal transforms.
    checks.push(check("measurement_rotation_invariance", {
        let gt = generate_ground_truth(6, 2, &[1.0, 0.5], 108)?;
        let ens = sample_sensing_ensemble(15, 6, 109)?;
        let y = measure(&gt, &ens)?;
        let p = gauss(&mut rng, 2, 2).qr().q();
        let rotated = gt.factor() * p;
        let y_rot = crate::model::measure_factor(&rotated, &ens)?;
        let worst = y
            .values()
            .iter()
            .zip(y_rot.values())
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-300))
            .fold(0.0_f64, f64::max);
        Ok((worst > 1e-12).then(|| format!("relative gap {worst:e}")))
    }));

    // Byte determinism of an experiment, serial vs. parallel.
    checks.push(check("experiment_byte_determinism", {
        let a = convergence_experiment(12, 1, 60, StepRule::theorem1(), 40, 7)?;
        let b = convergence_experiment(12, 1, 60, StepRule::theorem1(), 40, 7)?;
        let grid = PhaseGrid {
            trials: 3,
            max_iters: 150,
            base_seed: 5,
            ..PhaseGrid::new(vec![10], vec![1], vec![40, 60])
        };
        let (_, p1) = phase_transition_experiment(&grid, Some(1))?;
        let (_, p2) = phase_transition_experiment(&grid, Some(4))?;
        let csv_ok = a.csv == b.csv && p1.csv == p2.csv;
        let meta_ok = a.metadata == b.metadata && p1.metadata == p2.metadata;
        Ok((!(csv_ok && meta_ok)).then(|| "outputs differ across reruns or worker counts".into()))
    }));

    let mut out = String::new();
    let mut all_ok = true;
    for c in &checks {
        match &c.failure {
            None => out.push_str(&format!("ok   {}\n", c.name)),
            Some(detail) => {
                all_ok = false;
                out.push_str(&format!("FAIL {}: {}\n", c.name, detail));
            }
        }
    }
    out.push_str(&format!(
        "selftest: {}/{} checks passed\n",
        checks.iter().filter(|c| c.failure.is_none()).count(),
        checks.len()
    ));
    Ok((out, all_ok))
}
