//! `r1fm`: recover low-rank PSD matrices from rank-one quadratic
//! measurements, and drive the reproducible experiment harness.
//!
//! Exit codes: 0 on success, 2 on invalid arguments, 3 on numerical failure
//! (divergence, degenerate initialization, failed self-test), 1 on I/O
//! errors. Tables go to `--out` (with metadata in `<out>.meta.json`) or to
//! stdout; progress and timing notes go to stderr so that all comparable
//! output bytes are reproducible. `R1FM_THREADS` caps the worker pool;
//! `--threads` overrides it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use r1fm::experiments::{
    convergence_experiment, loo_diagnostic_experiment, phase_transition_experiment, selftest,
    sketch_demo, ExperimentOutput, PhaseGrid,
};
use r1fm::model::{
    generate_ground_truth, load_ensemble, load_measurements, measure, sample_sensing_ensemble,
    save_ensemble, save_measurements,
};
use r1fm::solver::{run_recovery, RecoveryConfig, StepRule};
use r1fm::Error;

#[derive(Parser)]
#[command(
    name = "r1fm",
    version,
    about = "Low-rank PSD matrix recovery from rank-one quadratic measurements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one recovery (synthetic instance, or loaded ensemble/measurements)
    Recover(RecoverArgs),
    /// Emit a fully traced convergence table for one seeded instance
    Converge(ConvergeArgs),
    /// Sweep a success-rate grid over (n, r, m) cells
    Phase(PhaseArgs),
    /// Leave-one-out proximity diagnostic
    Loo(LooArgs),
    /// Covariance-sketching demo: stream, sketch, recover
    Sketch(SketchArgs),
    /// Run the built-in oracle suites
    Selftest,
}

/// Flags shared by every experiment: config mirror, output path, workers.
#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Optional JSON config file mirroring the flags; explicit flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the CSV table here (metadata goes to <out>.meta.json)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker count (overrides R1FM_THREADS)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct StepRuleArgs {
    /// Step-size rule: fixed | theorem1 | corollary
    #[arg(long)]
    step_rule: Option<String>,
    /// Step size for the fixed rule
    #[arg(long)]
    mu: Option<f64>,
    /// Constant of the theorem1 rule
    #[arg(long)]
    c4: Option<f64>,
    /// Switch-iteration constant of the corollary rule
    #[arg(long)]
    c6: Option<f64>,
    /// Relaxed-step constant of the corollary rule
    #[arg(long)]
    c7: Option<f64>,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    /// Ambient dimension of the synthetic instance
    #[arg(long)]
    n: Option<usize>,
    /// Planted rank of the synthetic instance
    #[arg(long)]
    r: Option<usize>,
    /// Number of measurements
    #[arg(long)]
    m: Option<usize>,
    /// Recovery rank (defaults to the planted rank)
    #[arg(long)]
    rank: Option<usize>,
    #[command(flatten)]
    step: StepRuleArgs,
    /// Gradient-step budget
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Planted singular values, comma separated (defaults to all ones)
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Record a trace row every this many iterations
    #[arg(long)]
    trace_every: Option<usize>,
    /// Early-stop/success threshold on relative distance
    #[arg(long)]
    dist_tol: Option<f64>,
    /// Load the sensing ensemble from a flat binary file instead of sampling
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Load measurements from a flat binary file (requires --ensemble)
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Save the sensing ensemble used by this run
    #[arg(long)]
    dump_ensemble: Option<PathBuf>,
    /// Save the measurements used by this run
    #[arg(long)]
    dump_measurements: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[command(flatten)]
    step: StepRuleArgs,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct PhaseArgs {
    /// Ambient dimensions, comma separated
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Ranks, comma separated
    #[arg(long, value_delimiter = ',')]
    r_list: Option<Vec<usize>>,
    /// Measurement counts (or m/n multipliers with --m-over-n)
    #[arg(long, value_delimiter = ',')]
    m_list: Option<Vec<usize>>,
    /// Interpret --m-list entries as multipliers of n
    #[arg(long)]
    m_over_n: bool,
    #[arg(long)]
    trials: Option<usize>,
    /// Relative-distance success threshold
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct LooArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// How many leave-one-out indices to sample
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct SketchArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Number of streamed samples
    #[arg(long)]
    stream: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

/// JSON mirror of the flags; any subset may appear in a config file.
#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    n: Option<usize>,
    r: Option<usize>,
    m: Option<usize>,
    rank: Option<usize>,
    step_rule: Option<String>,
    mu: Option<f64>,
    c4: Option<f64>,
    c6: Option<f64>,
    c7: Option<f64>,
    iters: Option<usize>,
    seed: Option<u64>,
    sigma: Option<Vec<f64>>,
    trace_every: Option<usize>,
    dist_tol: Option<f64>,
    n_list: Option<Vec<usize>>,
    r_list: Option<Vec<usize>>,
    m_list: Option<Vec<usize>>,
    m_over_n: Option<bool>,
    trials: Option<usize>,
    threshold: Option<f64>,
    subset: Option<usize>,
    stream: Option<usize>,
    threads: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, Error> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidInput(format!("bad config file {}: {e}", p.display())))
        }
    }
}

fn build_step_rule(args: &StepRuleArgs, cfg: &FileConfig) -> Result<StepRule, Error> {
    let name = args
        .step_rule
        .clone()
        .or_else(|| cfg.step_rule.clone())
        .unwrap_or_else(|| "theorem1".to_string());
    match name.as_str() {
        "fixed" => {
            let mu = args
                .mu
                .or(cfg.mu)
                .ok_or_else(|| Error::InvalidInput("fixed rule requires --mu".into()))?;
            Ok(StepRule::Fixed { mu })
        }
        "theorem1" => Ok(StepRule::Theorem1 {
            c4: args.c4.or(cfg.c4).unwrap_or(1.0),
        }),
        "corollary" => Ok(StepRule::Corollary {
            c6: args.c6.or(cfg.c6).unwrap_or(1.0),
            c7: args.c7.or(cfg.c7).unwrap_or(1.0),
        }),
        other => Err(Error::InvalidInput(format!(
            "unknown step rule '{other}' (expected fixed | theorem1 | corollary)"
        ))),
    }
}

fn emit(output: &ExperimentOutput, out: &Option<PathBuf>) -> Result<(), Error> {
    match out {
        Some(path) => {
            std::fs::write(path, output.csv.as_bytes())?;
            let meta_path = meta_path_for(path);
            let mut doc = serde_json::to_string_pretty(&output.metadata)
                .map_err(|e| Error::InvalidInput(format!("metadata serialization: {e}")))?;
            doc.push('\n');
            std::fs::write(&meta_path, doc)?;
            eprintln!(
                "wrote {} and {} in {:.2}s",
                path.display(),
                meta_path.display(),
                output.wall_seconds
            );
        }
        None => {
            print!("{}", output.csv);
            eprintln!("{}", output.metadata);
            eprintln!("done in {:.2}s", output.wall_seconds);
        }
    }
    Ok(())
}

fn meta_path_for(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

const ENS_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn run_recover(args: RecoverArgs) -> Result<bool, Error> {
    let cfg_file = load_config(&args.common.config)?;
    let n = args.n.or(cfg_file.n).unwrap_or(32);
    let r = args.r.or(cfg_file.r).unwrap_or(1);
    let m = args.m.or(cfg_file.m).unwrap_or(8 * n);
    let seed = args.seed.or(cfg_file.seed).unwrap_or(0);
    let iters = args.iters.or(cfg_file.iters).unwrap_or(2000);
    let rank = args.rank.or(cfg_file.rank).unwrap_or(r);
    let trace_every = args.trace_every.or(cfg_file.trace_every).unwrap_or(1);
    let dist_tol = args.dist_tol.or(cfg_file.dist_tol);
    let step_rule = build_step_rule(&args.step, &cfg_file)?;

    // Instance: either loaded from files or synthesized from the seed.
    let (gt, ens, y) = match (&args.ensemble, &args.measurements) {
        (Some(epath), Some(ypath)) => {
            let ens = load_ensemble(epath)?;
            let y = load_measurements(ypath)?;
            y.check_bound_to(&ens)?;
            (None, ens, y)
        }
        (None, None) => {
            let sigma = args
                .sigma
                .clone()
                .or_else(|| cfg_file.sigma.clone())
                .unwrap_or_else(|| vec![1.0; r]);
            let gt = generate_ground_truth(n, r, &sigma, seed)?;
            let ens = sample_sensing_ensemble(m, n, seed ^ ENS_SEED_SALT)?;
            let y = measure(&gt, &ens)?;
            (Some(gt), ens, y)
        }
        _ => {
            return Err(Error::InvalidInput(
                "--ensemble and --measurements must be given together".into(),
            ))
        }
    };

    if let Some(path) = &args.dump_ensemble {
        save_ensemble(path, &ens)?;
    }
    if let Some(path) = &args.dump_measurements {
        save_measurements(path, &y, &ens)?;
    }

    let mut cfg = RecoveryConfig::for_rank(rank);
    cfg.max_iters = iters;
    cfg.step_rule = step_rule;
    cfg.trace_every = trace_every;
    cfg.stop_dist_tol = dist_tol;
    cfg.seed = seed;
    let report = run_recovery(&cfg, &ens, &y, gt.as_ref())?;

    let mut csv = String::from("t,loss,grad_norm,dist,incoherence,step_size\n");
    for row in &report.traces {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.t,
            row.loss,
            row.grad_norm,
            opt(row.dist),
            opt(row.incoherence),
            row.step_size,
        ));
    }

    let metadata = serde_json::json!({
        "experiment": "recover",
        "generator_id": ens.generator_id(),
        "base_seed": seed,
        "library_version": r1fm::experiments::LIBRARY_VERSION,
        "n": ens.n(),
        "r": r,
        "rank": rank,
        "m": ens.m(),
        "iters": iters,
        "iterations_run": report.iterations_run,
        "success": report.success,
        "degenerate_init": report.degenerate_init,
        "diverged": report.diverged,
        "final_rel_dist": report.final_rel_dist,
        "ensemble_fingerprint": format!("{:016x}", ens.fingerprint()),
    });
    let output = ExperimentOutput {
        csv,
        metadata,
        wall_seconds: report.wall_seconds,
    };
    emit(&output, &args.common.out)?;
    Ok(!(report.degenerate_init || report.diverged))
}

fn run_converge(args: ConvergeArgs) -> Result<(), Error> {
    let cfg_file = load_config(&args.common.config)?;
    let step_rule = build_step_rule(&args.step, &cfg_file)?;
    let output = convergence_experiment(
        args.n.or(cfg_file.n).unwrap_or(32),
        args.r.or(cfg_file.r).unwrap_or(1),
        args.m.or(cfg_file.m).unwrap_or(256),
        step_rule,
        args.iters.or(cfg_file.iters).unwrap_or(500),
        args.seed.or(cfg_file.seed).unwrap_or(0),
    )?;
    emit(&output, &args.common.out)
}

fn run_phase(args: PhaseArgs) -> Result<(), Error> {
    let cfg_file = load_config(&args.common.config)?;
    let grid = PhaseGrid {
        n_list: args.n_list.or(cfg_file.n_list).unwrap_or_else(|| vec![64]),
        r_list: args.r_list.or(cfg_file.r_list).unwrap_or_else(|| vec![1]),
        m_list: args
            .m_list
            .or(cfg_file.m_list)
            .unwrap_or_else(|| vec![2, 4, 6, 8]),
        m_over_n: args.m_over_n || cfg_file.m_over_n.unwrap_or(false),
        trials: args.trials.or(cfg_file.trials).unwrap_or(50),
        success_threshold: args.threshold.or(cfg_file.threshold).unwrap_or(1e-5),
        base_seed: args.seed.or(cfg_file.seed).unwrap_or(0),
        max_iters: args.iters.or(cfg_file.iters).unwrap_or(2000),
    };
    let workers = args.common.threads.or(cfg_file.threads);
    let (_, output) = phase_transition_experiment(&grid, workers)?;
    emit(&output, &args.common.out)
}

fn run_loo(args: LooArgs) -> Result<(), Error> {
    let cfg_file = load_config(&args.common.config)?;
    let m = args.m.or(cfg_file.m).unwrap_or(512);
    let output = loo_diagnostic_experiment(
        args.n.or(cfg_file.n).unwrap_or(32),
        args.r.or(cfg_file.r).unwrap_or(1),
        m,
        args.iters.or(cfg_file.iters).unwrap_or(400),
        args.subset.or(cfg_file.subset).unwrap_or(20.min(m)),
        args.seed.or(cfg_file.seed).unwrap_or(0),
        args.common.threads.or(cfg_file.threads),
    )?;
    emit(&output, &args.common.out)
}

fn run_sketch(args: SketchArgs) -> Result<(), Error> {
    let cfg_file = load_config(&args.common.config)?;
    let (report, output) = sketch_demo(
        args.n.or(cfg_file.n).unwrap_or(16),
        args.r.or(cfg_file.r).unwrap_or(1),
        args.m.or(cfg_file.m).unwrap_or(160),
        args.stream.or(cfg_file.stream).unwrap_or(100_000),
        args.seed.or(cfg_file.seed).unwrap_or(0),
    )?;
    if report.insufficient_stream {
        eprintln!("warning: insufficient stream (fewer than 100 samples)");
    }
    emit(&output, &args.common.out)
}

fn dispatch(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Recover(args) => run_recover(args),
        Command::Converge(args) => run_converge(args).map(|_| true),
        Command::Phase(args) => run_phase(args).map(|_| true),
        Command::Loo(args) => run_loo(args).map(|_| true),
        Command::Sketch(args) => run_sketch(args).map(|_| true),
        Command::Selftest => {
            let (text, ok) = selftest()?;
            print!("{text}");
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_) | Error::EmptyInput(_) | Error::MalformedFile(_) => {
                    ExitCode::from(2)
                }
                Error::ConvergenceFailure { .. } => ExitCode::from(3),
                Error::Io(_) => ExitCode::from(1),
            }
        }
    }
}
