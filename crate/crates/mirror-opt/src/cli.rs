//! Command-line harness: config parsing, experiment orchestration,
//! reproducible seeding, and CSV/plot-data emission.
//!
//! Every experiment is described by a single JSON document with a versioned
//! `schema` field ("mirror-opt/v1"). Subcommands:
//!
//! - `train-map`     — meta-train a mirror map and step schedule, writing
//!   `map.json`, `schedule.json`, and `training_log.csv`;
//! - `optimize`      — run optimizers over a seed list, one trace CSV per
//!   (seed, algorithm);
//! - `benchmark`     — grid-search baselines, then tabulate f at fixed
//!   checkpoints for tuned baselines plus the learned methods;
//! - `rate-check`    — fit a log–log convergence slope on an existing trace
//!   and report pass/fail against a threshold;
//! - `equivariance-check` — measure step-map commutation residuals over
//!   sampled hidden-unit permutations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
//! 4 I/O error. Failed numeric checks (rate-check, equivariance-check) are
//! reported on stdout and do not change the exit code. Reruns of a command
//! under the same config and seed produce byte-identical CSVs; the wall-clock
//! column stays zero unless timing is explicitly enabled.

use crate::diagnostics::{
    default_step_grid, fit_rate, grid_search_baseline, reference_minimum, GridSearchResult, Trace,
};
use crate::equivariance::{build_tying_schema, check_equivariance, expand_tied, Architecture,
    GroupElement};
use crate::error::{Error, Result};
use crate::io::{format_f64_17, read_json, write_json_17sig};
use crate::meta_training::{
    train_map, write_training_log_csv, InLoopAlgorithm, MapInit, MetaTrainConfig, ProblemFamily,
};
use crate::mirror_maps::{DualVector, MapDocument, MirrorMap, PrimalVector};
use crate::optimizers::{
    run_baseline, run_lamd, run_lasmd, run_lsmd, run_md, BaselineConfig, BaselineKind,
    ExtensionRule, RunOptions, StepSchedule,
};
use crate::problems::{
    generate_ellipse_phantom, make_moons, sample_quadratic_family, BinaryMlp, EllipsePhantomSpec,
    Problem, Quadratic, StochasticOracle, SvmHinge, TvRestore,
};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Schema tag every config document must carry.
pub const CONFIG_SCHEMA: &str = "mirror-opt/v1";

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "mirror-opt",
    version,
    about = "Learned mirror descent experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override: replaces the config's seed list with [N].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (fallback: the MIRROR_OPT_THREADS env var).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train a mirror map and step schedule.
    TrainMap,
    /// Run optimizers and write per-(seed, algorithm) trace CSVs.
    Optimize,
    /// Grid-search baselines and tabulate objective values at checkpoints.
    Benchmark,
    /// Fit a convergence slope on a trace and compare against a threshold.
    RateCheck,
    /// Measure permutation-commutation residuals of optimizer steps.
    EquivarianceCheck,
}

/// Top-level experiment description (JSON, versioned via `schema`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must equal [`CONFIG_SCHEMA`].
    pub schema: String,
    /// Objective instance commands operate on.
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    /// Mirror map (inline or a trained-map document path).
    #[serde(default)]
    pub map: Option<MapSpec>,
    /// Step schedule (inline or a trained-schedule document path).
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    /// Algorithms for `optimize`.
    #[serde(default)]
    pub algorithms: Vec<AlgorithmSpec>,
    /// Iteration count K for `optimize` (default 100).
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Record a trace row every this many iterations (default 1).
    #[serde(default)]
    pub stride: Option<usize>,
    /// Run seeds; also the stochastic-oracle seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Acceleration parameter r ≥ 3 (default 3).
    #[serde(default)]
    pub r: Option<f64>,
    /// Gradient extrapolation weight γ > 0 (default 1).
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Stochastic gradient oracle for sgd/lsmd/lasmd.
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
    /// Output directory (overridden by --out; default ".").
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// `train-map` section.
    #[serde(default)]
    pub train: Option<TrainSpec>,
    /// `benchmark` section.
    #[serde(default)]
    pub benchmark: Option<BenchmarkSpec>,
    /// `rate-check` section.
    #[serde(default)]
    pub rate_check: Option<RateCheckSpec>,
    /// `equivariance-check` section.
    #[serde(default)]
    pub equivariance: Option<EquivarianceSpec>,
}

/// Objective instance description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// ½xᵀdiag(d)x + bᵀx with explicit coefficients.
    Quadratic { d: Vec<f64>, b: Vec<f64> },
    /// Quadratic with shared curvature and a seed-sampled linear term.
    QuadraticSample { d: Vec<f64>, seed: u64 },
    /// TV denoising of a synthetic overlapping-ellipse image.
    DenoisePhantom {
        #[serde(default = "default_phantom_size")]
        size: usize,
        sigma: f64,
        lambda: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Soft-margin SVM on the two-moons set.
    SvmMoons {
        n: usize,
        noise: f64,
        c: f64,
        seed: u64,
    },
    /// 2–hidden–1 ReLU classifier on the two-moons set.
    MlpMoons {
        n: usize,
        noise: f64,
        hidden: usize,
        seed: u64,
    },
}

fn default_phantom_size() -> usize {
    128
}

impl ProblemSpec {
    /// Constructs the concrete problem instance.
    pub fn build(&self) -> Result<Problem> {
        Ok(match self {
            ProblemSpec::Quadratic { d, b } => {
                Problem::Quadratic(Quadratic::new(d.clone(), b.clone())?)
            }
            ProblemSpec::QuadraticSample { d, seed } => {
                Problem::Quadratic(sample_quadratic_family(d, *seed)?)
            }
            ProblemSpec::DenoisePhantom {
                size,
                sigma,
                lambda,
                seed,
            } => {
                let spec = EllipsePhantomSpec {
                    height: *size,
                    width: *size,
                    noise_std: *sigma,
                    seed: *seed,
                    ..EllipsePhantomSpec::default()
                };
                let (_, noisy) = generate_ellipse_phantom(&spec)?;
                Problem::TvRestore(TvRestore::denoise(noisy, *lambda)?)
            }
            ProblemSpec::SvmMoons { n, noise, c, seed } => {
                let (data, labels) = make_moons(*n, *noise, *seed);
                Problem::SvmHinge(SvmHinge::new(data, labels, *c)?)
            }
            ProblemSpec::MlpMoons {
                n,
                noise,
                hidden,
                seed,
            } => {
                let (data, labels) = make_moons(*n, *noise, *seed);
                if *hidden == 0 {
                    return Err(Error::Config("hidden width must be ≥ 1".into()));
                }
                Problem::BinaryMlp(BinaryMlp {
                    data,
                    labels,
                    hidden: *hidden,
                })
            }
        })
    }
}

/// Mirror-map description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Euclidean,
    Diagonal { d: Vec<f64> },
    SplineIdentity,
    /// Load a trained map document.
    File { path: PathBuf },
}

impl MapSpec {
    /// Builds the map, checking its dimension against the problem's.
    pub fn build(&self, dim: usize) -> Result<MirrorMap> {
        let map = match self {
            MapSpec::Euclidean => MirrorMap::euclidean(dim),
            MapSpec::Diagonal { d } => MirrorMap::diagonal(d.clone())?,
            MapSpec::SplineIdentity => MirrorMap::spline_identity(dim),
            MapSpec::File { path } => {
                let doc: MapDocument = read_referenced_json(path, "map document")?;
                MirrorMap::from_document(&doc)?
            }
        };
        if map.dimension() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: map.dimension(),
            });
        }
        Ok(map)
    }
}

/// Step-schedule description: inline learned steps or a document path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    File { path: PathBuf },
    Inline(StepSchedule),
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<StepSchedule> {
        match self {
            ScheduleSpec::File { path } => read_referenced_json(path, "schedule document"),
            ScheduleSpec::Inline(s) => Ok(s.clone()),
        }
    }
}

/// Algorithm selector for `optimize`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    Gd { step: f64 },
    Nesterov { step: f64 },
    Adam { step: f64 },
    Sgd { step: f64 },
    Md,
    Lamd,
    Lsmd,
    Lasmd,
}

impl AlgorithmSpec {
    /// Stable name used in trace file names.
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::Gd { .. } => "gd",
            AlgorithmSpec::Nesterov { .. } => "nesterov",
            AlgorithmSpec::Adam { .. } => "adam",
            AlgorithmSpec::Sgd { .. } => "sgd",
            AlgorithmSpec::Md => "md",
            AlgorithmSpec::Lamd => "lamd",
            AlgorithmSpec::Lsmd => "lsmd",
            AlgorithmSpec::Lasmd => "lasmd",
        }
    }
}

/// Stochastic gradient oracle description (seeded per run).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// Exact gradient plus isotropic Gaussian noise.
    Gaussian { sigma: f64 },
    /// Uniform with-replacement minibatches of data examples.
    Minibatch { batch_size: usize },
}

impl OracleSpec {
    pub fn build(&self, seed: u64) -> StochasticOracle {
        match self {
            OracleSpec::Gaussian { sigma } => StochasticOracle::gaussian(*sigma, seed),
            OracleSpec::Minibatch { batch_size } => StochasticOracle::minibatch(*batch_size, seed),
        }
    }
}

/// Problem family for meta-training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// The top-level problem with per-seed initial points.
    Fixed,
    /// Shared diagonal curvature, per-seed linear terms.
    QuadraticDiag { d: Vec<f64> },
    /// Per-seed phantom images under TV denoising.
    DenoisePhantoms {
        #[serde(default = "default_phantom_size")]
        size: usize,
        sigma: f64,
        lambda: f64,
    },
}

impl FamilySpec {
    fn build(&self, problem: Option<&ProblemSpec>) -> Result<ProblemFamily> {
        Ok(match self {
            FamilySpec::Fixed => {
                let spec = problem.ok_or_else(|| {
                    Error::Config("family kind 'fixed' needs a top-level problem".into())
                })?;
                ProblemFamily::Fixed(spec.build()?)
            }
            FamilySpec::QuadraticDiag { d } => ProblemFamily::QuadraticDiag { diag: d.clone() },
            FamilySpec::DenoisePhantoms {
                size,
                sigma,
                lambda,
            } => ProblemFamily::DenoisePhantoms {
                spec: EllipsePhantomSpec {
                    height: *size,
                    width: *size,
                    noise_std: *sigma,
                    ..EllipsePhantomSpec::default()
                },
                lambda: *lambda,
            },
        })
    }
}

/// Initial mirror map for meta-training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapInitSpec {
    Euclidean,
    DiagonalOnes,
    Diagonal { d: Vec<f64> },
    SplineIdentity,
}

impl MapInitSpec {
    fn build(&self, dim: usize) -> MapInit {
        match self {
            MapInitSpec::Euclidean => MapInit::Euclidean,
            MapInitSpec::DiagonalOnes => MapInit::diagonal_ones(dim),
            MapInitSpec::Diagonal { d } => MapInit::Diagonal { d: d.clone() },
            MapInitSpec::SplineIdentity => MapInit::spline_identity(),
        }
    }
}

/// `train-map` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub family: FamilySpec,
    pub map_init: MapInitSpec,
    pub steps_init: Vec<f64>,
    #[serde(default)]
    pub rule: Option<ExtensionRule>,
    #[serde(default)]
    pub divide_by_horizon: bool,
    #[serde(default)]
    pub penalty_weight: f64,
    #[serde(default)]
    pub final_only: bool,
    #[serde(default)]
    pub algorithm: Option<InLoopAlgorithm>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub init_batch: Option<usize>,
    #[serde(default)]
    pub meta_step: Option<f64>,
    #[serde(default)]
    pub meta_iters: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

/// `benchmark` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Baselines to grid-search (steps {1,2,5}·10ᵉ in per-kind ranges).
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineKind>,
    /// Grid selection minimizes f at this iteration.
    #[serde(default = "default_eval_iteration")]
    pub eval_iteration: usize,
    /// Checkpoints tabulated in the comparison table.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    /// Learned methods run alongside the tuned baselines.
    #[serde(default)]
    pub learned: Vec<LearnedAlg>,
}

fn default_baselines() -> Vec<BaselineKind> {
    vec![BaselineKind::Gd, BaselineKind::Nesterov, BaselineKind::Adam]
}

fn default_eval_iteration() -> usize {
    100
}

fn default_checkpoints() -> Vec<usize> {
    vec![10, 100, 1000, 2000]
}

/// Learned methods available to `benchmark`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnedAlg {
    Md,
    Lamd,
    Lsmd,
    Lasmd,
}

impl LearnedAlg {
    pub fn name(&self) -> &'static str {
        match self {
            LearnedAlg::Md => "md",
            LearnedAlg::Lamd => "lamd",
            LearnedAlg::Lsmd => "lsmd",
            LearnedAlg::Lasmd => "lasmd",
        }
    }
}

/// `rate-check` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateCheckSpec {
    /// Trace CSV to fit.
    pub trace: PathBuf,
    /// Where f* comes from.
    pub f_star: FStarSpec,
    pub k_lo: usize,
    pub k_hi: usize,
    /// Pass iff fitted slope ≤ threshold.
    pub threshold: f64,
}

/// Source of the reference optimum f*.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FStarSpec {
    /// Explicit value.
    Value(f64),
    /// Computed from the top-level problem by a long reference run.
    Reference { budget: f64 },
}

/// `equivariance-check` section.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivarianceSpec {
    /// Number of sampled group elements per check.
    #[serde(default = "default_eq_samples")]
    pub samples: usize,
    /// Residual pass threshold.
    #[serde(default = "default_eq_threshold")]
    pub threshold: f64,
    /// Step-size of the checked optimizer steps.
    #[serde(default = "default_eq_step")]
    pub step: f64,
}

fn default_eq_samples() -> usize {
    20
}

fn default_eq_threshold() -> f64 {
    1e-8
}

fn default_eq_step() -> f64 {
    0.05
}

/// One line of an equivariance report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivarianceCheckRow {
    pub check: String,
    pub max_residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Parses argv and runs the selected command, returning the process exit
/// code without calling `std::process::exit` (testable in-process).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mirror-opt: {e}");
            exit_code_for(&e)
        }
    }
}

/// Binary entry point.
pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

/// Maps error classes onto the documented exit codes.
pub fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::Config(_)
        | Error::DimensionMismatch { .. }
        | Error::UnsupportedArchitecture(_) => EXIT_CONFIG,
        Error::Divergence { .. }
        | Error::MetaDivergence { .. }
        | Error::NonFinite { .. }
        | Error::NonFiniteTrajectory { .. }
        | Error::NonFiniteMetaGradient { .. } => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_IO,
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("MIRROR_OPT_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("mirror-opt: thread pool already initialized; thread count unchanged");
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        if let Some(train) = cfg.train.as_mut() {
            train.seed = Some(seed);
        }
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::TrainMap => cmd_train_map(&cfg, &out_dir),
        Command::Optimize => cmd_optimize(&cfg, &out_dir),
        Command::Benchmark => cmd_benchmark(&cfg, &out_dir),
        Command::RateCheck => cmd_rate_check(&cfg),
        Command::EquivarianceCheck => cmd_equivariance_check(&cfg, &out_dir),
    }
}

/// Reads and validates a config document; all failures here are
/// configuration errors (exit 2), including a missing file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    if cfg.schema != CONFIG_SCHEMA {
        return Err(Error::Config(format!(
            "unsupported config schema '{}' (expected '{CONFIG_SCHEMA}')",
            cfg.schema
        )));
    }
    Ok(cfg)
}

/// Reads a JSON document referenced from a config; a missing path is a
/// configuration error per the referenced-paths-exist invariant.
fn read_referenced_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    read_json(path)
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    Ok(())
}

fn require_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    cfg.problem
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a 'problem' section".into()))?
        .build()
}

fn require_seeds(cfg: &ExperimentConfig) -> Result<&[u64]> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seed list must be nonempty".into()));
    }
    Ok(&cfg.seeds)
}

fn build_map(cfg: &ExperimentConfig, dim: usize) -> Result<MirrorMap> {
    cfg.map
        .as_ref()
        .unwrap_or(&MapSpec::Euclidean)
        .build(dim)
}

fn build_schedule(cfg: &ExperimentConfig) -> Result<StepSchedule> {
    cfg.schedule
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a 'schedule' section".into()))?
        .build()
}

fn require_oracle(cfg: &ExperimentConfig, alg: &str, seed: u64) -> Result<StochasticOracle> {
    Ok(cfg
        .oracle
        .ok_or_else(|| Error::Config(format!("{alg} needs an 'oracle' section")))?
        .build(seed))
}

// ---------------------------------------------------------------------------
// train-map

fn cmd_train_map(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let spec = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("train-map needs a 'train' section".into()))?;
    let family = spec.family.build(cfg.problem.as_ref())?;
    let dim = family.dim();
    let mut train_cfg = MetaTrainConfig::new(family, spec.map_init.build(dim), spec.steps_init.clone());
    if let Some(rule) = spec.rule {
        train_cfg.rule = rule;
    }
    train_cfg.divide_by_horizon = spec.divide_by_horizon;
    train_cfg.penalty_weight = spec.penalty_weight;
    train_cfg.final_only = spec.final_only;
    if let Some(alg) = spec.algorithm {
        train_cfg.algorithm = alg;
    }
    train_cfg.batch_size = spec.batch_size;
    if let Some(v) = spec.init_batch {
        train_cfg.init_batch = v;
    }
    if let Some(v) = spec.meta_step {
        train_cfg.meta_step = v;
    }
    if let Some(v) = spec.meta_iters {
        train_cfg.meta_iters = v;
    }
    if let Some(v) = spec.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = spec.r {
        train_cfg.r = v;
    }
    if let Some(v) = spec.gamma {
        train_cfg.gamma = v;
    }
    train_cfg.validate()?;

    println!(
        "train-map: {} meta-iterations, horizon {}, algorithm {}",
        train_cfg.meta_iters,
        train_cfg.unroll_n(),
        train_cfg.algorithm.name()
    );
    let output = train_map(&train_cfg)?;
    ensure_out_dir(out_dir)?;
    let map_path = out_dir.join("map.json");
    let schedule_path = out_dir.join("schedule.json");
    let log_path = out_dir.join("training_log.csv");
    write_json_17sig(&map_path, &output.map.to_document())?;
    write_json_17sig(&schedule_path, &output.schedule)?;
    write_training_log_csv(&log_path, &output.log)?;
    println!(
        "train-map: initial loss {}, final loss {}",
        format_f64_17(output.initial_loss),
        format_f64_17(output.final_loss)
    );
    if let (ProblemFamily::QuadraticDiag { diag }, MirrorMap::DiagonalQuadratic { d }) =
        (&train_cfg.family, &output.map)
    {
        // Closed-form check: the best diagonal weighting matches the
        // curvature up to overall scale.
        let ratio: Vec<f64> = d.iter().map(|v| v / d[0]).collect();
        let target: Vec<f64> = diag.iter().map(|v| v / diag[0]).collect();
        let max_rel = ratio
            .iter()
            .zip(&target)
            .map(|(r, t)| (r - t).abs() / t.abs().max(1e-12))
            .fold(0.0, f64::max);
        println!(
            "recovered-d: normalized=[{}] target=[{}] max-rel-err={:.6}",
            ratio
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(", "),
            target
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(", "),
            max_rel
        );
    }
    println!(
        "train-map: wrote {}, {}, {}",
        map_path.display(),
        schedule_path.display(),
        log_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// optimize

/// Deterministic trace file name for run index `i` of `seed` and algorithm.
pub fn trace_file_name(alg: &str, seed: u64, index: usize) -> String {
    format!("trace-{alg}-s{seed}-{index}.csv")
}

fn cmd_optimize(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let problem = require_problem(cfg)?;
    let seeds = require_seeds(cfg)?;
    if cfg.algorithms.is_empty() {
        return Err(Error::Config("optimize needs a nonempty 'algorithms' list".into()));
    }
    let map = build_map(cfg, problem.dim())?;
    let iterations = cfg.iterations.unwrap_or(100);
    let mut opts = RunOptions::iters(iterations);
    opts.objective_stride = cfg.stride.unwrap_or(1);
    let r = cfg.r.unwrap_or(3.0);
    let gamma = cfg.gamma.unwrap_or(1.0);
    ensure_out_dir(out_dir)?;

    // Fan the (seed, algorithm) grid out across worker threads; each run
    // writes its own file, so order does not affect the artifacts.
    let runs: Vec<(usize, u64, &AlgorithmSpec)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| cfg.algorithms.iter().map(move |a| (i, s, a)))
        .collect();
    let written: Vec<String> = runs
        .par_iter()
        .map(|&(index, seed, alg)| run_one(cfg, &problem, &map, alg, seed, index, r, gamma, &opts, out_dir))
        .collect::<Result<Vec<_>>>()?;
    for line in &written {
        println!("optimize: wrote {line}");
    }
    println!("optimize: {} trace files in {}", written.len(), out_dir.display());
    Ok(())
}

/// Runs one (seed, algorithm) cell and writes its trace CSV(s); a divergence
/// report becomes an error after the partial trace is on disk.
#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExperimentConfig,
    problem: &Problem,
    map: &MirrorMap,
    alg: &AlgorithmSpec,
    seed: u64,
    index: usize,
    r: f64,
    gamma: f64,
    opts: &RunOptions,
    out_dir: &Path,
) -> Result<String> {
    let x0 = problem.initial_point(seed);
    let file = out_dir.join(trace_file_name(alg.name(), seed, index));
    let (trace, ergodic, diverged) = match alg {
        AlgorithmSpec::Gd { step }
        | AlgorithmSpec::Nesterov { step }
        | AlgorithmSpec::Adam { step }
        | AlgorithmSpec::Sgd { step } => {
            let kind = match alg {
                AlgorithmSpec::Gd { .. } => BaselineKind::Gd,
                AlgorithmSpec::Nesterov { .. } => BaselineKind::Nesterov,
                AlgorithmSpec::Adam { .. } => BaselineKind::Adam,
                _ => BaselineKind::Sgd,
            };
            let oracle = if kind == BaselineKind::Sgd {
                Some(require_oracle(cfg, "sgd", seed)?)
            } else {
                None
            };
            let out = run_baseline(
                problem,
                &BaselineConfig::new(kind, *step)?,
                &x0,
                oracle.as_ref(),
                opts,
            )?;
            (out.trace, None, out.diverged)
        }
        AlgorithmSpec::Md => {
            let out = run_md(map, problem, &build_schedule(cfg)?, &x0, opts)?;
            (out.trace, Some(out.ergodic_trace), out.diverged)
        }
        AlgorithmSpec::Lamd => {
            let out = run_lamd(map, problem, &build_schedule(cfg)?, r, gamma, &x0, None, opts)?;
            (out.trace, None, out.diverged)
        }
        AlgorithmSpec::Lsmd => {
            let oracle = require_oracle(cfg, "lsmd", seed)?;
            let out = run_lsmd(map, problem, &oracle, &build_schedule(cfg)?, &x0, opts)?;
            (out.trace, Some(out.ergodic_trace), out.diverged)
        }
        AlgorithmSpec::Lasmd => {
            let oracle = require_oracle(cfg, "lasmd", seed)?;
            let out = run_lasmd(map, problem, &oracle, &build_schedule(cfg)?, &x0, opts)?;
            (out.trace, None, out.diverged)
        }
    };
    trace.write_csv(&file)?;
    if let Some(ergodic) = ergodic {
        ergodic.write_csv(out_dir.join(format!(
            "trace-{}-s{}-{}-ergodic.csv",
            alg.name(),
            seed,
            index
        )))?;
    }
    if let Some(rep) = diverged {
        return Err(Error::Divergence {
            k: rep.k,
            f: rep.f,
            limit: rep.limit,
        });
    }
    Ok(format!("{} ({} rows)", file.display(), trace.len()))
}

// ---------------------------------------------------------------------------
// benchmark

/// Header of the benchmark table CSV for the given checkpoints.
pub fn benchmark_header(checkpoints: &[usize]) -> String {
    let mut cols = vec!["algorithm".to_string(), "step".to_string()];
    cols.extend(checkpoints.iter().map(|k| format!("f_at_{k}")));
    cols.join(",")
}

fn benchmark_row(name: &str, step: Option<f64>, trace: &Trace, checkpoints: &[usize]) -> String {
    let mut cells = vec![
        name.to_string(),
        step.map(format_f64_17).unwrap_or_default(),
    ];
    for &k in checkpoints {
        cells.push(
            trace
                .row_at(k)
                .map(|r| format_f64_17(r.f))
                .unwrap_or_default(),
        );
    }
    cells.join(",")
}

fn cmd_benchmark(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let spec = cfg
        .benchmark
        .as_ref()
        .ok_or_else(|| Error::Config("benchmark needs a 'benchmark' section".into()))?;
    if spec.checkpoints.is_empty() {
        return Err(Error::Config("benchmark checkpoints must be nonempty".into()));
    }
    let problem = require_problem(cfg)?;
    let seed = require_seeds(cfg)?[0];
    let x0 = problem.initial_point(seed);
    let horizon = *spec.checkpoints.iter().max().unwrap();
    let opts = RunOptions::iters(horizon);
    let r = cfg.r.unwrap_or(3.0);
    let gamma = cfg.gamma.unwrap_or(1.0);
    ensure_out_dir(out_dir)?;

    let mut rows = Vec::new();
    for &kind in &spec.baselines {
        let oracle = if kind == BaselineKind::Sgd {
            Some(require_oracle(cfg, "sgd", seed)?)
        } else {
            None
        };
        let grid = default_step_grid(kind);
        let result: GridSearchResult = grid_search_baseline(
            &problem,
            kind,
            &grid,
            spec.eval_iteration,
            &x0,
            oracle.as_ref(),
        )?;
        write_grid_csv(&out_dir.join(format!("grid-{}.csv", kind.name())), &result)?;
        let out = run_baseline(&problem, &result.best, &x0, oracle.as_ref(), &opts)?;
        if let Some(rep) = out.diverged {
            return Err(Error::Divergence {
                k: rep.k,
                f: rep.f,
                limit: rep.limit,
            });
        }
        rows.push(benchmark_row(
            kind.name(),
            Some(result.best.step),
            &out.trace,
            &spec.checkpoints,
        ));
    }

    for alg in &spec.learned {
        let map = build_map(cfg, problem.dim())?;
        let schedule = build_schedule(cfg)?;
        let (trace, diverged) = match alg {
            LearnedAlg::Md => {
                let out = run_md(&map, &problem, &schedule, &x0, &opts)?;
                (out.trace, out.diverged)
            }
            LearnedAlg::Lamd => {
                let out = run_lamd(&map, &problem, &schedule, r, gamma, &x0, None, &opts)?;
                (out.trace, out.diverged)
            }
            LearnedAlg::Lsmd => {
                let oracle = require_oracle(cfg, "lsmd", seed)?;
                let out = run_lsmd(&map, &problem, &oracle, &schedule, &x0, &opts)?;
                (out.trace, out.diverged)
            }
            LearnedAlg::Lasmd => {
                let oracle = require_oracle(cfg, "lasmd", seed)?;
                let out = run_lasmd(&map, &problem, &oracle, &schedule, &x0, &opts)?;
                (out.trace, out.diverged)
            }
        };
        if let Some(rep) = diverged {
            return Err(Error::Divergence {
                k: rep.k,
                f: rep.f,
                limit: rep.limit,
            });
        }
        rows.push(benchmark_row(alg.name(), None, &trace, &spec.checkpoints));
    }

    let mut table = benchmark_header(&spec.checkpoints);
    for row in &rows {
        table.push('\n');
        table.push_str(row);
    }
    table.push('\n');
    let path = out_dir.join("benchmark.csv");
    fs::write(&path, &table)?;
    print!("{table}");
    println!("benchmark: wrote {}", path.display());
    Ok(())
}

fn write_grid_csv(path: &Path, result: &GridSearchResult) -> Result<()> {
    let mut text = String::from("step,f_eval,f_horizon\n");
    for entry in &result.table {
        text.push_str(&format_f64_17(entry.step));
        text.push(',');
        text.push_str(&entry.f_eval.map(format_f64_17).unwrap_or_default());
        text.push(',');
        text.push_str(&entry.f_horizon.map(format_f64_17).unwrap_or_default());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// rate-check

fn cmd_rate_check(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg
        .rate_check
        .as_ref()
        .ok_or_else(|| Error::Config("rate-check needs a 'rate_check' section".into()))?;
    if !spec.trace.is_file() {
        return Err(Error::Config(format!(
            "trace file {} does not exist",
            spec.trace.display()
        )));
    }
    let trace = Trace::read_csv(&spec.trace)?;
    let f_star = match spec.f_star {
        FStarSpec::Value(v) => v,
        FStarSpec::Reference { budget } => reference_minimum(&require_problem(cfg)?, budget)?,
    };
    let slope = fit_rate(&trace, f_star, spec.k_lo, spec.k_hi)?;
    let pass = slope <= spec.threshold;
    println!(
        "rate-check: slope {:.6} over k in [{}, {}] against threshold {:.6}: {}",
        slope,
        spec.k_lo,
        spec.k_hi,
        spec.threshold,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// equivariance-check

fn cmd_equivariance_check(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let spec = cfg.equivariance.unwrap_or(EquivarianceSpec {
        samples: default_eq_samples(),
        threshold: default_eq_threshold(),
        step: default_eq_step(),
    });
    if spec.samples == 0 {
        return Err(Error::Config("equivariance samples must be ≥ 1".into()));
    }
    let problem = require_problem(cfg)?;
    let arch = Architecture::from_problem(&problem)?;
    let layers = arch
        .layers()
        .ok_or_else(|| {
            Error::UnsupportedArchitecture(
                "permutation sampling covers dense architectures only".into(),
            )
        })?
        .to_vec();
    let schema = build_tying_schema(&arch)?;
    let seed0 = cfg.seeds.first().copied().unwrap_or(0);
    let z = problem.initial_point(seed0);
    let t = spec.step;

    let gd_step = |p: &PrimalVector| -> Result<PrimalVector> {
        let g = problem.gradient(p)?;
        Ok(PrimalVector(&p.0 - &(t * &g.0)))
    };
    let tied_values: Vec<f64> = (0..schema.orbit_count())
        .map(|i| 0.5 + 0.3 * i as f64)
        .collect();
    let tied_map = MirrorMap::diagonal(expand_tied(&schema, &tied_values)?.0.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed0);
    let untied_map = MirrorMap::diagonal(
        (0..schema.total_dim)
            .map(|_| rng.gen_range(0.5..2.0))
            .collect(),
    )?;
    let lmd_step = |map: &MirrorMap, p: &PrimalVector| -> Result<PrimalVector> {
        let g = problem.gradient(p)?;
        let y = map.forward(p)?;
        map.inverse(&DualVector(&y.0 - &(t * &g.0)))
    };

    let mut report = Vec::new();
    let checks: [(&str, Box<dyn Fn(&PrimalVector) -> Result<PrimalVector> + '_>); 3] = [
        ("gd-step", Box::new(gd_step)),
        ("tied-diagonal-lmd", Box::new(|p: &PrimalVector| lmd_step(&tied_map, p))),
        ("untied-diagonal-lmd", Box::new(|p: &PrimalVector| lmd_step(&untied_map, p))),
    ];
    for (name, step_map) in &checks {
        let mut max_residual: f64 = 0.0;
        for s in 0..spec.samples {
            let g = GroupElement::sample(&layers, s as u64)?;
            max_residual = max_residual.max(check_equivariance(step_map, &g, &z)?);
        }
        let pass = max_residual <= spec.threshold;
        println!(
            "equivariance-check {name}: max residual {max_residual:.3e} over {} group elements (threshold {:.1e}) {}",
            spec.samples,
            spec.threshold,
            if pass { "PASS" } else { "FAIL" }
        );
        report.push(EquivarianceCheckRow {
            check: name.to_string(),
            max_residual,
            threshold: spec.threshold,
            pass,
        });
    }
    ensure_out_dir(out_dir)?;
    write_json_17sig(&out_dir.join("tying_schema.json"), &schema)?;
    write_json_17sig(&out_dir.join("equivariance_report.json"), &report)?;
    println!(
        "equivariance-check: wrote {} and {}",
        out_dir.join("tying_schema.json").display(),
        out_dir.join("equivariance_report.json").display()
    );
    Ok(())
}
