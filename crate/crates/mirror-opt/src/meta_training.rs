//! Unrolled meta-training of mirror maps and step-size schedules.
//!
//! Learned mirror descent picks the map parameters θ and the step-sizes
//! (t₁, …, t_N) by minimizing the unrolled objective
//!
//!   L̃(θ, t) = E [ Σ_{k=1}^N f(x̃ₖ(θ, t)) ],
//!
//! where x̃ₖ are the first N iterates of the in-loop optimizer on a problem
//! instance drawn from a family, and the expectation is approximated by a
//! fixed batch of instances. Because every map in this crate has an exact
//! inverse, the inverse-consistency penalty s_k‖(∇ψ* ∘ ∇ψ − I)(x̃ₖ)‖ is
//! identically zero and contributes nothing to the loss or its gradient; the
//! weight is kept in the configuration for forward compatibility only.
//!
//! The unrolled iterations are rebuilt as reverse-mode tape graphs, one tape
//! per sampled instance, and differentiated with respect to
//!
//! - the map parameters (log-weights of the diagonal map, or log-increments
//!   of the elementwise spline), and
//! - the log-step-sizes u_k = ln t_k, which keeps every t_k = exp(u_k)
//!   strictly positive by construction.
//!
//! Meta-optimization is plain gradient descent on (θ, u) with a fixed base
//! step; a halving backtracking line search rejects non-finite or increasing
//! trials so the meta-loss is non-increasing along the run. A central
//! finite-difference oracle over the same parameterization validates the
//! reverse-mode gradients in tests.

use crate::error::{Error, Result};
use crate::io::format_f64_17;
use crate::mirror_maps::{
    MirrorMap, PrimalVector, SplineMap, SPLINE_INCREMENTS, SPLINE_KNOTS, SPLINE_MIN_INCREMENT,
};
use crate::optimizers::{ExtensionRule, StepSchedule};
use crate::problems::{EllipsePhantomSpec, Problem, StochasticOracle, TvRestore};
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rayon::prelude::*;
use std::fs;
use std::path::Path;

/// Index of the spline knot at which the cumulative values are anchored to 0.
const SPLINE_CENTER: usize = SPLINE_INCREMENTS / 2;

/// Maximum number of step halvings in the backtracking line search.
const MAX_HALVINGS: usize = 40;

/// Parameter-count guard for the finite-difference oracle.
const FD_PARAM_LIMIT: usize = 500;

/// Optimizer that is unrolled inside the meta-training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InLoopAlgorithm {
    /// Dual-variable mirror descent y ← y − t∇f(∇ψ*(y)); the stablest form
    /// to differentiate through and therefore the default.
    #[default]
    LmdDual,
    /// Accelerated mirror descent with coupling r/(r+k) and correction γt.
    Lamd,
    /// Dual-variable mirror descent driven by minibatch gradients.
    Lsmd,
}

impl InLoopAlgorithm {
    /// Stable name used in configs and logs.
    pub fn name(&self) -> &'static str {
        match self {
            InLoopAlgorithm::LmdDual => "lmd_dual",
            InLoopAlgorithm::Lamd => "lamd",
            InLoopAlgorithm::Lsmd => "lsmd",
        }
    }
}

/// A distribution over problem instances with deterministic per-seed draws.
#[derive(Debug, Clone)]
pub enum ProblemFamily {
    /// One fixed problem; samples differ only through the seeded initial
    /// point (e.g. a batch of network initializations).
    Fixed(Problem),
    /// Quadratics ½xᵀdiag(a)x + bᵀx with a shared diagonal and b ~ 𝒩(0, I).
    QuadraticDiag { diag: Vec<f64> },
    /// TV denoising of freshly drawn noisy ellipse phantoms.
    DenoisePhantoms { spec: EllipsePhantomSpec, lambda: f64 },
}

impl ProblemFamily {
    /// Flat parameter dimension shared by every instance of the family.
    pub fn dim(&self) -> usize {
        match self {
            ProblemFamily::Fixed(p) => p.dim(),
            ProblemFamily::QuadraticDiag { diag } => diag.len(),
            ProblemFamily::DenoisePhantoms { spec, .. } => spec.height * spec.width,
        }
    }

    /// Draws one (problem, initial point) pair; identical seeds give
    /// identical draws.
    pub fn sample(&self, seed: u64) -> Result<(Problem, PrimalVector)> {
        let problem = match self {
            ProblemFamily::Fixed(p) => p.clone(),
            ProblemFamily::QuadraticDiag { diag } => {
                Problem::Quadratic(crate::problems::sample_quadratic_family(diag, seed)?)
            }
            ProblemFamily::DenoisePhantoms { spec, lambda } => {
                let mut spec = spec.clone();
                spec.seed = seed;
                let (_, noisy) = crate::problems::generate_ellipse_phantom(&spec)?;
                Problem::TvRestore(TvRestore::denoise(noisy, *lambda)?)
            }
        };
        let x0 = problem.initial_point(seed);
        Ok((problem, x0))
    }
}

/// Initialization of the trainable mirror map.
#[derive(Debug, Clone)]
pub enum MapInit {
    /// Untrainable identity map; only the step-sizes are learned.
    Euclidean,
    /// Diagonal quadratic map started from the given (positive) weights.
    Diagonal { d: Vec<f64> },
    /// Elementwise spline started from the given increment log-parameters.
    Spline { u: Vec<f64> },
}

impl MapInit {
    /// Diagonal map started at the identity.
    pub fn diagonal_ones(dim: usize) -> Self {
        MapInit::Diagonal { d: vec![1.0; dim] }
    }

    /// Spline map started at the identity (slope-one increments).
    pub fn spline_identity() -> Self {
        MapInit::Spline {
            u: SplineMap::identity().increment_params().to_vec(),
        }
    }

    /// Builds the concrete map for a family of the given dimension.
    pub fn to_map(&self, dim: usize) -> Result<MirrorMap> {
        match self {
            MapInit::Euclidean => Ok(MirrorMap::euclidean(dim)),
            MapInit::Diagonal { d } => {
                if d.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: d.len(),
                    });
                }
                MirrorMap::diagonal(d.clone())
            }
            MapInit::Spline { u } => Ok(MirrorMap::spline(SplineMap::from_increment_params(u)?, dim)),
        }
    }
}

/// Configuration of one meta-training run.
#[derive(Debug, Clone)]
pub struct MetaTrainConfig {
    /// Problem distribution the unrolled loss is averaged over.
    pub family: ProblemFamily,
    /// Trainable map kind and its initialization.
    pub map_init: MapInit,
    /// Initial learned step-sizes; the length is the unroll horizon N.
    pub steps_init: Vec<f64>,
    /// Extension rule attached to the trained schedule.
    pub rule: ExtensionRule,
    /// Whether the reciprocal-rule constants are divided by the horizon.
    pub divide_by_horizon: bool,
    /// Inverse-consistency penalty weight s_k ≥ 0. Exact-inverse maps make
    /// the penalty identically zero, so the value never changes the loss.
    pub penalty_weight: f64,
    /// Weight only the final unrolled iterate instead of all N of them.
    pub final_only: bool,
    /// Optimizer that is unrolled inside the loss.
    pub algorithm: InLoopAlgorithm,
    /// Minibatch size of the in-loop stochastic oracle (`lsmd` only).
    pub batch_size: Option<usize>,
    /// Number of problem instances in the fixed meta-training batch.
    pub init_batch: usize,
    /// Base meta-descent step (backtracking halves it on bad trials).
    pub meta_step: f64,
    /// Number of meta-iterations.
    pub meta_iters: usize,
    /// Seed for the family draws and in-loop oracles.
    pub seed: u64,
    /// Acceleration parameter of the `lamd` in-loop algorithm.
    pub r: f64,
    /// Gradient-correction weight of the `lamd` in-loop algorithm.
    pub gamma: f64,
}

impl MetaTrainConfig {
    /// A configuration with conventional defaults: dual-form unroll, batch
    /// of 20 instances, reciprocal extension, 100 meta-iterations.
    pub fn new(family: ProblemFamily, map_init: MapInit, steps_init: Vec<f64>) -> Self {
        MetaTrainConfig {
            family,
            map_init,
            steps_init,
            rule: ExtensionRule::Reciprocal,
            divide_by_horizon: false,
            penalty_weight: 0.0,
            final_only: false,
            algorithm: InLoopAlgorithm::LmdDual,
            batch_size: None,
            init_batch: 20,
            meta_step: 0.05,
            meta_iters: 100,
            seed: 0,
            r: 3.0,
            gamma: 1.0,
        }
    }

    /// Unroll horizon N.
    pub fn unroll_n(&self) -> usize {
        self.steps_init.len()
    }

    /// Checks the invariants required by [`train_map`].
    pub fn validate(&self) -> Result<()> {
        if self.steps_init.is_empty() {
            return Err(Error::Config("unroll horizon must be ≥ 1".into()));
        }
        if self.steps_init.iter().any(|&t| !t.is_finite() || t <= 0.0) {
            return Err(Error::Config(
                "initial step-sizes must be finite and > 0".into(),
            ));
        }
        if !self.penalty_weight.is_finite() || self.penalty_weight < 0.0 {
            return Err(Error::Config("penalty weight must be ≥ 0".into()));
        }
        if self.init_batch == 0 {
            return Err(Error::Config("meta-training batch must be non-empty".into()));
        }
        if !self.meta_step.is_finite() || self.meta_step <= 0.0 {
            return Err(Error::Config("meta-step must be finite and > 0".into()));
        }
        if !(self.r >= 3.0) {
            return Err(Error::Config("acceleration parameter r must be ≥ 3".into()));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::Config("correction weight γ must be > 0".into()));
        }
        if self.algorithm == InLoopAlgorithm::Lsmd && self.batch_size.is_none() {
            return Err(Error::Config(
                "the lsmd in-loop algorithm needs a batch size".into(),
            ));
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::Config("in-loop batch size must be ≥ 1".into()));
            }
        }
        // Build the initial map once so dimension mismatches surface early.
        self.map_init.to_map(self.family.dim())?;
        Ok(())
    }

    /// Schedule holding the initial learned steps and the extension rule.
    pub fn initial_schedule(&self) -> Result<StepSchedule> {
        StepSchedule::with_divisor(self.steps_init.clone(), self.rule, self.divide_by_horizon)
    }
}

/// Gradient of the batch-averaged unrolled loss.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// ∂L̃/∂θ over the map parameters (log-weights or spline log-increments).
    pub map_grad: Vec<f64>,
    /// ∂L̃/∂u_k over the log-step-sizes u_k = ln t_k.
    pub step_grad: Vec<f64>,
    /// Batch-averaged unrolled loss at the evaluation point.
    pub loss: f64,
}

impl MetaGradient {
    /// ℓ₂ norm over all components.
    pub fn norm(&self) -> f64 {
        self.map_grad
            .iter()
            .chain(self.step_grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// One line of the meta-training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub meta_iter: usize,
    pub meta_loss: f64,
    pub grad_norm: f64,
    /// Smallest current learned step-size.
    pub min_t: f64,
    /// Largest current learned step-size.
    pub max_t: f64,
}

/// Header of the training-log CSV.
pub const TRAIN_LOG_CSV_HEADER: &str = "meta_iter,meta_loss,grad_norm,min_t,max_t";

/// Renders the training log as CSV with round-trip-exact floats.
pub fn training_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(TRAIN_LOG_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.meta_iter,
            format_f64_17(r.meta_loss),
            format_f64_17(r.grad_norm),
            format_f64_17(r.min_t),
            format_f64_17(r.max_t),
        ));
    }
    out
}

/// Writes the training log CSV to a file.
pub fn write_training_log_csv(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    fs::write(path, training_log_csv(rows))?;
    Ok(())
}

/// Result of a meta-training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Trained mirror map.
    pub map: MirrorMap,
    /// Trained step-size schedule (learned prefix plus extension rule).
    pub schedule: StepSchedule,
    /// One row per completed meta-iteration, measured before its update.
    pub log: Vec<TrainLogRow>,
    /// Batch loss at the initialization.
    pub initial_loss: f64,
    /// Batch loss at the returned parameters.
    pub final_loss: f64,
}

/// Draws the fixed meta-training batch: instance j uses seed `seed + j`.
pub fn sample_batch(cfg: &MetaTrainConfig) -> Result<Vec<(Problem, PrimalVector)>> {
    (0..cfg.init_batch)
        .map(|j| cfg.family.sample(cfg.seed + j as u64))
        .collect()
}

/// Trainable-parameter view of a map: log-weights of the diagonal map,
/// increment log-parameters of the spline, empty for the euclidean map.
fn map_params(map: &MirrorMap) -> Vec<f64> {
    match map {
        MirrorMap::Euclidean { .. } => Vec::new(),
        MirrorMap::DiagonalQuadratic { d } => d.iter().map(|v| v.ln()).collect(),
        MirrorMap::SplineElementwise { spline, .. } => spline.increment_params().to_vec(),
    }
}

/// Rebuilds a map of the same kind from updated trainable parameters.
fn map_with_params(template: &MirrorMap, params: &[f64]) -> Result<MirrorMap> {
    match template {
        MirrorMap::Euclidean { dim } => {
            if !params.is_empty() {
                return Err(Error::DimensionMismatch {
                    expected: 0,
                    got: params.len(),
                });
            }
            Ok(MirrorMap::euclidean(*dim))
        }
        MirrorMap::DiagonalQuadratic { d } => {
            if params.len() != d.len() {
                return Err(Error::DimensionMismatch {
                    expected: d.len(),
                    got: params.len(),
                });
            }
            MirrorMap::diagonal(params.iter().map(|w| w.exp()).collect())
        }
        MirrorMap::SplineElementwise { dim, .. } => Ok(MirrorMap::spline(
            SplineMap::from_increment_params(params)?,
            *dim,
        )),
    }
}

/// Rebuilds a schedule with new learned steps but the same extension rule.
fn schedule_like(schedule: &StepSchedule, learned: Vec<f64>) -> Result<StepSchedule> {
    StepSchedule::with_divisor(learned, schedule.rule(), schedule.divides_by_horizon())
}

/// Constant matrix T mapping positive increments e to knot values c = Te:
/// cᵢ = Σ_{j=center}^{i−1} eⱼ − Σ_{j=i}^{center−1} eⱼ, anchoring the center
/// knot value at zero exactly as the spline's own constructor does.
fn increment_cumsum_matrix() -> Array2<f64> {
    let mut t = Array2::zeros((SPLINE_KNOTS, SPLINE_INCREMENTS));
    for i in 0..SPLINE_KNOTS {
        for j in 0..SPLINE_INCREMENTS {
            if j >= SPLINE_CENTER && j < i {
                t[(i, j)] = 1.0;
            } else if j >= i && j < SPLINE_CENTER {
                t[(i, j)] = -1.0;
            }
        }
    }
    t
}

/// Mirror-map nodes on a tape, applied per parameter tensor.
enum TapeMapNodes {
    Euclidean,
    Diagonal { d: Vec<NodeId>, d_inv: Vec<NodeId> },
    Spline { values: NodeId, knots: Vec<f64> },
}

impl TapeMapNodes {
    /// ∇ψ applied to per-tensor primal nodes.
    fn forward(&self, tape: &mut Tape, x: &[NodeId]) -> Vec<NodeId> {
        match self {
            TapeMapNodes::Euclidean => x.to_vec(),
            TapeMapNodes::Diagonal { d, .. } => x
                .iter()
                .zip(d)
                .map(|(&xj, &dj)| tape.mul_elem(xj, dj))
                .collect(),
            TapeMapNodes::Spline { values, knots } => x
                .iter()
                .map(|&xj| tape.spline_fwd(xj, *values, knots))
                .collect(),
        }
    }

    /// ∇ψ* applied to per-tensor dual nodes.
    fn inverse(&self, tape: &mut Tape, y: &[NodeId]) -> Vec<NodeId> {
        match self {
            TapeMapNodes::Euclidean => y.to_vec(),
            TapeMapNodes::Diagonal { d_inv, .. } => y
                .iter()
                .zip(d_inv)
                .map(|(&yj, &dj)| tape.mul_elem(yj, dj))
                .collect(),
            TapeMapNodes::Spline { values, knots } => y
                .iter()
                .map(|&yj| tape.spline_inv(yj, *values, knots))
                .collect(),
        }
    }
}

/// One sample's unrolled-iteration graph.
struct SampleGraph {
    tape: Tape,
    /// Leaves carrying the trainable map parameters, with their shapes.
    map_leaves: Vec<(NodeId, (usize, usize))>,
    /// Scalar leaves carrying the log-step-sizes.
    step_leaves: Vec<NodeId>,
    /// Loss root (1×1).
    root: NodeId,
    /// Loss value.
    loss: f64,
}

/// Builds the map's tape nodes, returning the trainable leaves.
fn build_map_nodes(
    tape: &mut Tape,
    map: &MirrorMap,
    problem: &Problem,
) -> Result<(Vec<(NodeId, (usize, usize))>, TapeMapNodes)> {
    match map {
        MirrorMap::Euclidean { .. } => Ok((Vec::new(), TapeMapNodes::Euclidean)),
        MirrorMap::DiagonalQuadratic { d } => {
            let w = PrimalVector::from_vec(d.iter().map(|v| v.ln()).collect());
            let tensors = problem.unpack(&w)?;
            let mut leaves = Vec::with_capacity(tensors.len());
            let mut dn = Vec::with_capacity(tensors.len());
            let mut dinv = Vec::with_capacity(tensors.len());
            for t in tensors {
                let shape = t.dim();
                let leaf = tape.leaf(t);
                leaves.push((leaf, shape));
                dn.push(tape.exp(leaf));
                let neg = tape.neg(leaf);
                dinv.push(tape.exp(neg));
            }
            Ok((leaves, TapeMapNodes::Diagonal { d: dn, d_inv: dinv }))
        }
        MirrorMap::SplineElementwise { spline, .. } => {
            let u_leaf = tape.leaf_col(spline.increment_params());
            let e = tape.exp(u_leaf);
            let e = tape.add_const(e, SPLINE_MIN_INCREMENT);
            let t_mat = tape.leaf(increment_cumsum_matrix());
            let values = tape.matmul(t_mat, e);
            Ok((
                vec![(u_leaf, (SPLINE_INCREMENTS, 1))],
                TapeMapNodes::Spline {
                    values,
                    knots: SplineMap::knots(),
                },
            ))
        }
    }
}

/// Unrolls the in-loop optimizer for one sample and sums the iterate
/// objectives into a single loss root.
fn build_sample_graph(
    cfg: &MetaTrainConfig,
    map: &MirrorMap,
    steps: &[f64],
    problem: &Problem,
    x0: &PrimalVector,
    oracle_seed: u64,
) -> Result<SampleGraph> {
    let n = steps.len();
    let mut tape = Tape::new();
    let (map_leaves, nodes) = build_map_nodes(&mut tape, map, problem)?;
    let step_leaves: Vec<NodeId> = steps.iter().map(|t| tape.leaf_scalar(t.ln())).collect();
    let t_nodes: Vec<NodeId> = step_leaves.iter().map(|&u| tape.exp(u)).collect();
    let x0_nodes = problem.leaves_from_flat(&mut tape, x0)?;

    // Minibatch index draws of the in-loop stochastic oracle, one per step.
    let batches: Option<Vec<Vec<usize>>> = match cfg.algorithm {
        InLoopAlgorithm::Lsmd => {
            let size = cfg
                .batch_size
                .ok_or_else(|| Error::Config("the lsmd in-loop algorithm needs a batch size".into()))?;
            let oracle = StochasticOracle::minibatch(size, oracle_seed);
            Some(
                (0..n)
                    .map(|k| oracle.batch_indices(problem, k as u64))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };

    let mut terms: Vec<NodeId> = Vec::with_capacity(n);
    let push_term =
        |tape: &mut Tape, terms: &mut Vec<NodeId>, x: &[NodeId], k: usize| -> Result<()> {
            let term = problem.loss_node(tape, x, None)?;
            if !tape.value(term)[(0, 0)].is_finite() {
                return Err(Error::NonFiniteTrajectory { k });
            }
            terms.push(term);
            Ok(())
        };

    match cfg.algorithm {
        InLoopAlgorithm::LmdDual | InLoopAlgorithm::Lsmd => {
            let mut x = x0_nodes;
            let mut y = nodes.forward(&mut tape, &x);
            for k in 1..=n {
                let batch = batches.as_ref().map(|b| &b[k - 1][..]);
                let g = problem.grad_nodes(&mut tape, &x, batch)?;
                for (yj, gj) in y.iter_mut().zip(&g) {
                    let gt = tape.scale(*gj, t_nodes[k - 1]);
                    *yj = tape.sub(*yj, gt);
                }
                x = nodes.inverse(&mut tape, &y);
                push_term(&mut tape, &mut terms, &x, k)?;
            }
        }
        InLoopAlgorithm::Lamd => {
            let mut x_tilde = x0_nodes;
            let mut z = nodes.forward(&mut tape, &x_tilde);
            for k in 0..n {
                let lam = cfg.r / (cfg.r + k as f64);
                let zx = nodes.inverse(&mut tape, &z);
                let x_next: Vec<NodeId> = zx
                    .iter()
                    .zip(&x_tilde)
                    .map(|(&zj, &xj)| {
                        let a = tape.mul_k(zj, lam);
                        let b = tape.mul_k(xj, 1.0 - lam);
                        tape.add(a, b)
                    })
                    .collect();
                let g = problem.grad_nodes(&mut tape, &x_next, None)?;
                let z_coeff = tape.mul_k(t_nodes[k], k as f64 / cfg.r);
                let x_coeff = tape.mul_k(t_nodes[k], cfg.gamma);
                for (zj, gj) in z.iter_mut().zip(&g) {
                    let step = tape.scale(*gj, z_coeff);
                    *zj = tape.sub(*zj, step);
                }
                x_tilde = x_next
                    .iter()
                    .zip(&g)
                    .map(|(&xj, &gj)| {
                        let step = tape.scale(gj, x_coeff);
                        tape.sub(xj, step)
                    })
                    .collect();
                push_term(&mut tape, &mut terms, &x_tilde, k + 1)?;
            }
        }
    }

    let root = if cfg.final_only {
        *terms.last().expect("n ≥ 1 checked by callers")
    } else {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        acc
    };
    let loss = tape.value(root)[(0, 0)];
    if !loss.is_finite() {
        return Err(Error::NonFiniteTrajectory { k: n });
    }
    Ok(SampleGraph {
        tape,
        map_leaves,
        step_leaves,
        root,
        loss,
    })
}

/// Unrolled loss Σ_k f(x̃ₖ) of one problem instance (zero for an empty
/// learned prefix). The in-loop stochastic oracle, if any, uses the
/// configuration seed, matching sample index 0 of the meta batch.
pub fn unrolled_loss(
    cfg: &MetaTrainConfig,
    map: &MirrorMap,
    schedule: &StepSchedule,
    problem: &Problem,
    x0: &PrimalVector,
) -> Result<f64> {
    if schedule.horizon() == 0 {
        return Ok(0.0);
    }
    Ok(build_sample_graph(cfg, map, schedule.learned(), problem, x0, cfg.seed)?.loss)
}

/// Per-sample loss and parameter gradients, in meta-batch order.
fn per_sample_grads(
    cfg: &MetaTrainConfig,
    map: &MirrorMap,
    steps: &[f64],
    samples: &[(Problem, PrimalVector)],
) -> Result<Vec<(f64, Vec<f64>, Vec<f64>)>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(j, (problem, x0))| {
            let graph = build_sample_graph(cfg, map, steps, problem, x0, cfg.seed + j as u64)?;
            let grads = graph.tape.backward(graph.root);
            let mut map_g = Vec::new();
            for &(leaf, shape) in &graph.map_leaves {
                map_g.extend(grads.get_or_zero(leaf, shape).iter().cloned());
            }
            let step_g: Vec<f64> = graph
                .step_leaves
                .iter()
                .map(|&l| grads.get_or_zero(l, (1, 1))[(0, 0)])
                .collect();
            Ok((graph.loss, map_g, step_g))
        })
        .collect()
}

/// Batch-averaged unrolled loss over explicit samples.
pub fn meta_loss(
    cfg: &MetaTrainConfig,
    map: &MirrorMap,
    schedule: &StepSchedule,
    samples: &[(Problem, PrimalVector)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("meta-training batch is empty".into()));
    }
    if schedule.horizon() == 0 {
        return Ok(0.0);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(j, (problem, x0))| {
            Ok(build_sample_graph(cfg, map, schedule.learned(), problem, x0, cfg.seed + j as u64)?
                .loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Reverse-mode gradient of the batch-averaged unrolled loss with respect to
/// the map parameters and the log-step-sizes.
pub fn meta_gradient(
    cfg: &MetaTrainConfig,
    map: &MirrorMap,
    schedule: &StepSchedule,
    samples: &[(Problem, PrimalVector)],
) -> Result<MetaGradient> {
    if samples.is_empty() {
        return Err(Error::Config("meta-training batch is empty".into()));
    }
    let p_map = map_params(map).len();
    let n = schedule.horizon();
    if n == 0 {
        return Ok(MetaGradient {
            map_grad: vec![0.0; p_map],
            step_grad: Vec::new(),
            loss: 0.0,
        });
    }
    let per_sample = per_sample_grads(cfg, map, schedule.learned(), samples)?;
    let m = per_sample.len() as f64;
    let mut map_grad = vec![0.0; p_map];
    let mut step_grad = vec![0.0; n];
    let mut loss = 0.0;
    for (l, mg, sg) in per_sample {
        loss += l;
        for (acc, g) in map_grad.iter_mut().zip(&mg) {
            *acc += g;
        }
        for (acc, g) in step_grad.iter_mut().zip(&sg) {
            *acc += g;
        }
    }
    loss /= m;
    for g in map_grad.iter_mut().chain(step_grad.iter_mut()) {
        *g /= m;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "meta-training loss",
        });
    }
    if let Some(k) = map_grad
        .iter()
        .chain(step_grad.iter())
        .position(|g| !g.is_finite())
    {
        return Err(Error::NonFiniteMetaGradient { k });
    }
    Ok(MetaGradient {
        map_grad,
        step_grad,
        loss,
    })
}

/// Central-difference gradient over the same parameterization as
/// [`meta_gradient`]; test oracle only, limited to 500 parameters.
pub fn finite_difference_oracle(
    cfg: &MetaTrainConfig,
    map: &MirrorMap,
    schedule: &StepSchedule,
    samples: &[(Problem, PrimalVector)],
    h: f64,
) -> Result<MetaGradient> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Config(
            "finite-difference step must be finite and > 0".into(),
        ));
    }
    let w = map_params(map);
    let u: Vec<f64> = schedule.learned().iter().map(|t| t.ln()).collect();
    let total = w.len() + u.len();
    if total > FD_PARAM_LIMIT {
        return Err(Error::Config(format!(
            "finite-difference oracle supports at most {FD_PARAM_LIMIT} parameters, got {total}"
        )));
    }
    let eval = |w2: &[f64], u2: &[f64]| -> Result<f64> {
        let map2 = map_with_params(map, w2)?;
        let sch2 = schedule_like(schedule, u2.iter().map(|v| v.exp()).collect())?;
        meta_loss(cfg, &map2, &sch2, samples)
    };
    let loss = eval(&w, &u)?;
    let mut map_grad = vec![0.0; w.len()];
    let mut step_grad = vec![0.0; u.len()];
    for i in 0..w.len() {
        let mut wp = w.clone();
        wp[i] += h;
        let mut wm = w.clone();
        wm[i] -= h;
        map_grad[i] = (eval(&wp, &u)? - eval(&wm, &u)?) / (2.0 * h);
    }
    for i in 0..u.len() {
        let mut up = u.clone();
        up[i] += h;
        let mut um = u.clone();
        um[i] -= h;
        step_grad[i] = (eval(&w, &up)? - eval(&w, &um)?) / (2.0 * h);
    }
    Ok(MetaGradient {
        map_grad,
        step_grad,
        loss,
    })
}

/// Meta-trains the map and schedule by gradient descent on (θ, u) with a
/// halving backtracking line search, over a fixed batch of family samples.
pub fn train_map(cfg: &MetaTrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let samples = sample_batch(cfg)?;
    let mut map = cfg.map_init.to_map(cfg.family.dim())?;
    let mut schedule = cfg.initial_schedule()?;
    let mut w = map_params(&map);
    let mut u: Vec<f64> = schedule.learned().iter().map(|t| t.ln()).collect();

    let mut grad = meta_gradient(cfg, &map, &schedule, &samples)?;
    let initial_loss = grad.loss;
    let limit = 1e3 * initial_loss.abs().max(1e-12);
    let mut log = Vec::with_capacity(cfg.meta_iters);

    for iter in 0..cfg.meta_iters {
        if grad.loss > limit {
            return Err(Error::MetaDivergence {
                iter,
                loss: grad.loss,
                limit,
            });
        }
        let learned = schedule.learned();
        log.push(TrainLogRow {
            meta_iter: iter,
            meta_loss: grad.loss,
            grad_norm: grad.norm(),
            min_t: learned.iter().cloned().fold(f64::INFINITY, f64::min),
            max_t: learned.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });

        // Backtracking: halve the step until the trial is finite and
        // non-increasing; parameter-validity failures (e.g. overflowed
        // exponentials) count as rejections.
        let mut accepted = None;
        let mut s = cfg.meta_step;
        for _ in 0..=MAX_HALVINGS {
            let w2: Vec<f64> = w.iter().zip(&grad.map_grad).map(|(v, g)| v - s * g).collect();
            let u2: Vec<f64> = u.iter().zip(&grad.step_grad).map(|(v, g)| v - s * g).collect();
            let trial = map_with_params(&map, &w2).and_then(|m2| {
                let sch2 = schedule_like(&schedule, u2.iter().map(|v| v.exp()).collect())?;
                let l2 = meta_loss(cfg, &m2, &sch2, &samples)?;
                Ok((m2, sch2, l2))
            });
            match trial {
                Ok((m2, sch2, l2)) if l2.is_finite() && l2 <= grad.loss => {
                    accepted = Some((w2, u2, m2, sch2));
                    break;
                }
                Ok(_)
                | Err(Error::NonFiniteTrajectory { .. })
                | Err(Error::Config(_))
                | Err(Error::NonFinite { .. }) => {}
                Err(e) => return Err(e),
            }
            s /= 2.0;
        }
        let Some((w2, u2, m2, sch2)) = accepted else {
            break;
        };
        w = w2;
        u = u2;
        map = m2;
        schedule = sch2;
        grad = meta_gradient(cfg, &map, &schedule, &samples)?;
    }

    Ok(TrainOutput {
        map,
        schedule,
        log,
        initial_loss,
        final_loss: grad.loss,
    })
}
