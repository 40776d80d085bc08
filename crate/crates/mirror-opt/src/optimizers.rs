//! The optimizer family built on a shared dual-variable formulation.
//!
//! A mirror-descent step with map ψ and step-size t moves the iterate through
//! dual space: x⁺ = ∇ψ*(∇ψ(x) − t·∇f(x)).  [`md_step_primal`] performs that
//! round trip; [`md_step_dual`] keeps the running variable in dual
//! coordinates, y⁺ = y − t·∇f(∇ψ*(y)), which is the form every runner here
//! uses.  On top of the plain step this module provides
//!
//! - [`run_md`] / [`run_lsmd`]: (stochastic) mirror descent with an ergodic
//!   average x̃₀ᵏ = Σᵢ γᵢ x⁽ⁱ⁾, γᵢ = tᵢ/Σⱼtⱼ,
//! - [`run_lamd`]: accelerated mirror descent with dual accumulation
//!   z⁽ᵏ⁺¹⁾ = z⁽ᵏ⁾ − (k·t_k/r)·g(x⁽ᵏ⁺¹⁾), coupling λ_k = r/(r+k) and a
//!   gradient correction x̃⁽ᵏ⁺¹⁾ = x⁽ᵏ⁺¹⁾ − γ·t_k·g(x⁽ᵏ⁺¹⁾),
//! - [`run_lasmd`]: accelerated stochastic mirror descent with the
//!   A_k = k(k+1)/2, s_k = (k+1)^{3/2} weight sequences,
//! - [`run_baseline`]: GD, Nesterov, Adam and SGD references.
//!
//! Step-size schedules hold a learned prefix t₁..t_N and extend beyond the
//! horizon with constant or reciprocal rules ([`StepSchedule`]).  Runners
//! never crash on a blow-up: a divergence detector stops the run and returns
//! the partial trace together with a [`DivergenceReport`].

use crate::diagnostics::{Trace, TraceMeta, TraceRow};
use crate::error::{Error, Result};
use crate::mirror_maps::{DualVector, MirrorMap, PrimalVector};
use crate::problems::{Problem, StochasticOracle};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// How step-sizes are produced beyond the learned horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionRule {
    /// Mean of the learned steps.
    ConstantMean,
    /// Minimum of the learned steps.
    ConstantMin,
    /// Final learned step.
    ConstantFinal,
    /// t_k = c/k with c = Σᵢ i·tᵢ over the learned prefix.
    Reciprocal,
    /// t_k = c′/√k with c′ = Σᵢ i·√tᵢ over the learned prefix.
    RootReciprocal,
    /// t_k = value for every k past the horizon.
    Fixed(f64),
}

/// Serialized form of a schedule; derived constants are rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDoc {
    pub learned: Vec<f64>,
    pub rule: ExtensionRule,
    #[serde(default)]
    pub divide_by_horizon: bool,
}

/// Learned step-sizes t₁..t_N plus an extension rule for k > N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDoc", into = "ScheduleDoc")]
pub struct StepSchedule {
    learned: Vec<f64>,
    rule: ExtensionRule,
    divide_by_horizon: bool,
    /// Cached reciprocal constant c = Σᵢ i·tᵢ.
    c_reciprocal: f64,
    /// Cached root-reciprocal constant c′ = Σᵢ i·√tᵢ.
    c_root: f64,
}

impl StepSchedule {
    /// Builds a schedule; every learned step must be finite and positive.
    pub fn new(learned: Vec<f64>, rule: ExtensionRule) -> Result<Self> {
        StepSchedule::with_divisor(learned, rule, false)
    }

    /// As [`StepSchedule::new`], optionally dividing the reciprocal constants
    /// by the horizon length N (they are literal weighted sums by default).
    pub fn with_divisor(
        learned: Vec<f64>,
        rule: ExtensionRule,
        divide_by_horizon: bool,
    ) -> Result<Self> {
        if learned.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::Config(
                "learned step-sizes must be finite and > 0".into(),
            ));
        }
        if let ExtensionRule::Fixed(v) = rule {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config("fixed step must be finite and > 0".into()));
            }
        } else if learned.is_empty() {
            return Err(Error::Config(
                "non-fixed extension rules need at least one learned step".into(),
            ));
        }
        let mut c = 0.0;
        let mut c_root = 0.0;
        for (i, t) in learned.iter().enumerate() {
            let w = (i + 1) as f64;
            c += w * t;
            c_root += w * t.sqrt();
        }
        if divide_by_horizon && !learned.is_empty() {
            let n = learned.len() as f64;
            c /= n;
            c_root /= n;
        }
        Ok(StepSchedule {
            learned,
            rule,
            divide_by_horizon,
            c_reciprocal: c,
            c_root,
        })
    }

    /// A schedule that emits `value` at every iteration.
    pub fn fixed(value: f64) -> Result<Self> {
        StepSchedule::new(Vec::new(), ExtensionRule::Fixed(value))
    }

    pub fn learned(&self) -> &[f64] {
        &self.learned
    }

    pub fn rule(&self) -> ExtensionRule {
        self.rule
    }

    /// Length N of the learned prefix.
    pub fn horizon(&self) -> usize {
        self.learned.len()
    }

    /// Cached constants (c, c′) of the reciprocal rules.
    pub fn constants(&self) -> (f64, f64) {
        (self.c_reciprocal, self.c_root)
    }

    /// Whether the reciprocal-rule constants are divided by the horizon.
    pub fn divides_by_horizon(&self) -> bool {
        self.divide_by_horizon
    }

    /// Step t_k for 1-based k; learned value for k ≤ N, extension beyond.
    pub fn step(&self, k: usize) -> Result<f64> {
        extend_stepsizes(self, k)
    }
}

impl TryFrom<ScheduleDoc> for StepSchedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        StepSchedule::with_divisor(doc.learned, doc.rule, doc.divide_by_horizon)
    }
}

impl From<StepSchedule> for ScheduleDoc {
    fn from(s: StepSchedule) -> ScheduleDoc {
        ScheduleDoc {
            learned: s.learned,
            rule: s.rule,
            divide_by_horizon: s.divide_by_horizon,
        }
    }
}

/// Step-size t_k for 1-based k: the learned value for k ≤ N, the extension
/// rule beyond (reciprocal: c/k; root-reciprocal: c′/√k).
pub fn extend_stepsizes(s: &StepSchedule, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("step index must be ≥ 1".into()));
    }
    if k <= s.learned.len() {
        return Ok(s.learned[k - 1]);
    }
    let n = s.learned.len() as f64;
    Ok(match s.rule {
        ExtensionRule::ConstantMean => s.learned.iter().sum::<f64>() / n,
        ExtensionRule::ConstantMin => s.learned.iter().cloned().fold(f64::INFINITY, f64::min),
        ExtensionRule::ConstantFinal => *s.learned.last().expect("non-empty"),
        ExtensionRule::Reciprocal => s.c_reciprocal / k as f64,
        ExtensionRule::RootReciprocal => s.c_root / (k as f64).sqrt(),
        ExtensionRule::Fixed(v) => v,
    })
}

fn all_finite(a: &Array1<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn norm(a: &Array1<f64>) -> f64 {
    a.dot(a).sqrt()
}

/// One primal mirror-descent step ∇ψ*(∇ψ(x) − t·grad).
pub fn md_step_primal(
    map: &MirrorMap,
    x: &PrimalVector,
    grad: &DualVector,
    t: f64,
) -> Result<PrimalVector> {
    if !all_finite(&grad.0) {
        return Err(Error::NonFinite {
            context: "primal step gradient",
        });
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Config("step-size must be finite and ≥ 0".into()));
    }
    let y = map.forward(x)?;
    map.inverse(&DualVector(&y.0 - &(t * &grad.0)))
}

/// One dual mirror-descent step y − t·grad, with grad evaluated at ∇ψ*(y).
pub fn md_step_dual(
    map: &MirrorMap,
    y: &DualVector,
    t: f64,
    grad_at_inverse: &DualVector,
) -> Result<DualVector> {
    if y.len() != map.dimension() || grad_at_inverse.len() != map.dimension() {
        return Err(Error::DimensionMismatch {
            expected: map.dimension(),
            got: y.len().max(grad_at_inverse.len()),
        });
    }
    if !all_finite(&y.0) || !all_finite(&grad_at_inverse.0) {
        return Err(Error::NonFinite {
            context: "dual step input",
        });
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Config("step-size must be finite and ≥ 0".into()));
    }
    Ok(DualVector(&y.0 - &(t * &grad_at_inverse.0)))
}

/// Shared knobs for every runner.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Number of iterations K; K = 0 records the initialization only.
    pub max_iters: usize,
    /// Keep per-iteration states (needed for energy diagnostics).
    pub record_states: bool,
    /// Record a trace row every this many iterations (the final row always).
    pub objective_stride: usize,
    /// Fill the wall_ns column; off keeps traces bit-reproducible.
    pub record_timing: bool,
    /// Stop once f exceeds this factor times |f(x⁽⁰⁾)|.
    pub divergence_factor: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_iters: 100,
            record_states: false,
            objective_stride: 1,
            record_timing: false,
            divergence_factor: 1e6,
        }
    }
}

impl RunOptions {
    /// Default options with the given iteration count.
    pub fn iters(max_iters: usize) -> Self {
        RunOptions {
            max_iters,
            ..RunOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.objective_stride == 0 {
            return Err(Error::Config("objective stride must be ≥ 1".into()));
        }
        if !self.divergence_factor.is_finite() || self.divergence_factor <= 0.0 {
            return Err(Error::Config(
                "divergence factor must be finite and > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Where and how a run blew up; the trace holds everything up to this point.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub k: usize,
    pub f: f64,
    pub limit: f64,
}

/// Trace recording shared by all runners: stride handling, wall-clock
/// stamps, and the f ≤ limit divergence detector.
struct Recorder {
    trace: Trace,
    stride: usize,
    timing: bool,
    limit: f64,
    start: Instant,
    diverged: Option<DivergenceReport>,
}

impl Recorder {
    fn new(meta: TraceMeta, opts: &RunOptions, f0: f64) -> Self {
        Recorder {
            trace: Trace::new(meta),
            stride: opts.objective_stride,
            timing: opts.record_timing,
            limit: opts.divergence_factor * f0.abs().max(1e-12),
            start: Instant::now(),
            diverged: None,
        }
    }

    fn due(&self, k: usize, last: bool) -> bool {
        last || k % self.stride == 0
    }

    /// Pushes a row; returns true when the run must stop (divergence).
    fn record(&mut self, k: usize, t: f64, f: f64, grad_norm: f64, cons: f64) -> Result<bool> {
        let wall_ns = if self.timing {
            self.start.elapsed().as_nanos() as u64
        } else {
            0
        };
        self.trace.push(TraceRow {
            k,
            t,
            f,
            grad_norm,
            consistency_error: cons,
            wall_ns,
        })?;
        if !f.is_finite() || f > self.limit {
            self.diverged = Some(DivergenceReport {
                k,
                f,
                limit: self.limit,
            });
            return Ok(true);
        }
        Ok(false)
    }

    /// Records a non-finite row after a numeric blow-up inside a step.
    fn record_blowup(&mut self, k: usize, t: f64) -> Result<()> {
        self.record(k, t, f64::NAN, 0.0, 0.0)?;
        Ok(())
    }
}

fn objective_or_nan(problem: &Problem, x: &PrimalVector) -> Result<f64> {
    match problem.objective(x) {
        Ok(f) => Ok(f),
        Err(Error::NonFinite { .. }) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

fn consistency_or_nan(map: &MirrorMap, x: &PrimalVector) -> f64 {
    map.consistency_error(x).unwrap_or(f64::NAN)
}

/// State of accelerated mirror descent: iterate x⁽ᵏ⁾, corrected iterate
/// x̃⁽ᵏ⁾, dual accumulator z⁽ᵏ⁾ (= ∇ψ(z̃⁽ᵏ⁾)), and the parameters r, γ.
#[derive(Debug, Clone)]
pub struct AmdState {
    pub x: PrimalVector,
    pub x_tilde: PrimalVector,
    pub z_dual: DualVector,
    pub k: usize,
    pub r: f64,
    pub gamma: f64,
}

impl AmdState {
    /// Initializes at x⁽⁰⁾ = x̃⁽⁰⁾ = x0 with z⁽⁰⁾ = ∇ψ(x0); requires r ≥ 3.
    pub fn new(map: &MirrorMap, x0: &PrimalVector, r: f64, gamma: f64) -> Result<Self> {
        if !(r >= 3.0) {
            return Err(Error::Config("acceleration parameter r must be ≥ 3".into()));
        }
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::Config("correction weight γ must be > 0".into()));
        }
        Ok(AmdState {
            x: x0.clone(),
            x_tilde: x0.clone(),
            z_dual: map.forward(x0)?,
            k: 0,
            r,
            gamma,
        })
    }

    /// Coupling weight λ_k = r/(r+k); λ₀ = 1.
    pub fn lambda(&self) -> f64 {
        self.r / (self.r + self.k as f64)
    }

    /// One iteration with step t_k: couples x⁽ᵏ⁺¹⁾ = λ_k∇ψ*(z⁽ᵏ⁾) +
    /// (1−λ_k)x̃⁽ᵏ⁾, then updates z (weight k·t_k/r) and x̃ (weight γ·t_k)
    /// with the gradient at x⁽ᵏ⁺¹⁾.  Returns that gradient's norm.
    pub fn advance<F>(&mut self, map: &MirrorMap, t: f64, grad: F) -> Result<f64>
    where
        F: FnOnce(&PrimalVector) -> Result<DualVector>,
    {
        let lam = self.lambda();
        let zx = map.inverse(&self.z_dual)?;
        let x_next = PrimalVector(lam * &zx.0 + (1.0 - lam) * &self.x_tilde.0);
        let g = grad(&x_next)?;
        if g.len() != x_next.len() {
            return Err(Error::DimensionMismatch {
                expected: x_next.len(),
                got: g.len(),
            });
        }
        if !all_finite(&g.0) {
            return Err(Error::NonFinite {
                context: "accelerated step gradient",
            });
        }
        let kf = self.k as f64;
        self.z_dual.0 -= &((kf * t / self.r) * &g.0);
        self.x_tilde = PrimalVector(&x_next.0 - &(self.gamma * t * &g.0));
        self.x = x_next;
        self.k += 1;
        Ok(norm(&g.0))
    }
}

/// State of accelerated stochastic mirror descent: iterate x⁽ᵏ⁾, dual
/// variable y⁽ᵏ⁾, and the weight recurrences A_{k+1} = (k+1)(k+2)/2,
/// τ_k = (A_{k+1}−A_k)/A_k, s_k = (k+1)^{3/2}.
#[derive(Debug, Clone)]
pub struct AsmdState {
    pub x: PrimalVector,
    pub y_dual: DualVector,
    pub a: f64,
    pub s: f64,
    pub tau: f64,
    pub k: usize,
}

impl AsmdState {
    /// Initializes at x0 with y⁽⁰⁾ = ∇ψ(x0) and A₀ = s₀ = 1/2.
    pub fn new(map: &MirrorMap, x0: &PrimalVector) -> Result<Self> {
        Ok(AsmdState {
            x: x0.clone(),
            y_dual: map.forward(x0)?,
            a: 0.5,
            s: 0.5,
            tau: 0.0,
            k: 0,
        })
    }

    /// One iteration with step t_k: couples x⁽ᵏ⁺¹⁾ = (τ_k/(τ_k+1))∇ψ*(y⁽ᵏ⁾)
    /// + (1/(τ_k+1))x⁽ᵏ⁾, then y⁽ᵏ⁺¹⁾ = y⁽ᵏ⁾ − t_k((A_{k+1}−A_k)/s_k)·
    /// g(x⁽ᵏ⁺¹⁾).  The weights are recomputed from the loop formulas each
    /// call (so the k = 0 dual coefficient is (A₁−A₀)/1 = 1/2).
    pub fn advance<F>(&mut self, map: &MirrorMap, t: f64, grad: F) -> Result<f64>
    where
        F: FnOnce(&PrimalVector) -> Result<DualVector>,
    {
        let kf = self.k as f64;
        let a_next = (kf + 1.0) * (kf + 2.0) / 2.0;
        let tau = (a_next - self.a) / self.a;
        let s = (kf + 1.0).powf(1.5);
        let w = map.inverse(&self.y_dual)?;
        let x_next = PrimalVector((tau / (tau + 1.0)) * &w.0 + (1.0 / (tau + 1.0)) * &self.x.0);
        let g = grad(&x_next)?;
        if g.len() != x_next.len() {
            return Err(Error::DimensionMismatch {
                expected: x_next.len(),
                got: g.len(),
            });
        }
        if !all_finite(&g.0) {
            return Err(Error::NonFinite {
                context: "accelerated stochastic step gradient",
            });
        }
        self.y_dual.0 -= &((t * (a_next - self.a) / s) * &g.0);
        self.a = a_next;
        self.s = s;
        self.tau = tau;
        self.x = x_next;
        self.k += 1;
        Ok(norm(&g.0))
    }
}

/// Per-iteration states of an accelerated run, kept when
/// `record_states` is set; index k holds x⁽ᵏ⁾, x̃⁽ᵏ⁾, z⁽ᵏ⁾.
#[derive(Debug, Clone)]
pub struct LamdStates {
    pub x: Vec<PrimalVector>,
    pub x_tilde: Vec<PrimalVector>,
    pub z_dual: Vec<DualVector>,
}

/// Result of an accelerated (LAMD) run.
#[derive(Debug, Clone)]
pub struct LamdOutput {
    pub trace: Trace,
    pub final_x: PrimalVector,
    pub states: Option<LamdStates>,
    pub diverged: Option<DivergenceReport>,
    pub r: f64,
    pub gamma: f64,
    /// Whether γ ≥ L_R·L_{ψ*} (with R = ½‖·‖², L_R = 1) when computable.
    pub gamma_admissible: Option<bool>,
}

/// Accelerated mirror descent; deterministic gradients when `oracle` is
/// `None`, stochastic/minibatched gradients (draw index k at loop k) otherwise.
pub fn run_lamd(
    map: &MirrorMap,
    problem: &Problem,
    schedule: &StepSchedule,
    r: f64,
    gamma: f64,
    x0: &PrimalVector,
    oracle: Option<&StochasticOracle>,
    opts: &RunOptions,
) -> Result<LamdOutput> {
    opts.validate()?;
    let mut state = AmdState::new(map, x0, r, gamma)?;
    let k_max = opts.max_iters;
    let mut states = opts.record_states.then(|| LamdStates {
        x: vec![x0.clone(); 1],
        x_tilde: vec![x0.clone(); 1],
        z_dual: vec![state.z_dual.clone(); 1],
    });

    let meta = TraceMeta {
        algorithm: "lamd".into(),
        map_kind: map.kind_name().into(),
        problem_kind: problem.kind_name().into(),
        seed: oracle.map_or(0, |o| o.seed),
    };
    let f0 = problem.objective(x0)?;
    let mut rec = Recorder::new(meta, opts, f0);
    rec.record(0, schedule.step(1)?, f0, 0.0, consistency_or_nan(map, x0))?;

    for k in 0..k_max {
        let t = schedule.step(k + 1)?;
        let step_result = state.advance(map, t, |x| match oracle {
            Some(o) => o.gradient(problem, x, k as u64),
            None => problem.gradient(x),
        });
        let gn = match step_result {
            Ok(gn) => gn,
            Err(Error::NonFinite { .. }) => {
                rec.record_blowup(k + 1, t)?;
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(s) = states.as_mut() {
            s.x.push(state.x.clone());
            s.x_tilde.push(state.x_tilde.clone());
            s.z_dual.push(state.z_dual.clone());
        }
        let kk = k + 1;
        if rec.due(kk, kk == k_max) {
            let f = objective_or_nan(problem, &state.x)?;
            let stop = rec.record(
                kk,
                schedule.step(kk + 1)?,
                f,
                gn,
                consistency_or_nan(map, &state.x),
            )?;
            if stop {
                break;
            }
        }
    }

    let gamma_admissible = map.dual_smoothness().map(|l| gamma >= l);
    Ok(LamdOutput {
        trace: rec.trace,
        final_x: state.x,
        states,
        diverged: rec.diverged,
        r,
        gamma,
        gamma_admissible,
    })
}

/// Result of a (stochastic) mirror-descent run.
#[derive(Debug, Clone)]
pub struct LsmdOutput {
    pub trace: Trace,
    /// Trace of the ergodic average x̃₀ᵏ (grad_norm column is 0).
    pub ergodic_trace: Trace,
    pub final_x: PrimalVector,
    pub final_ergodic: PrimalVector,
    pub diverged: Option<DivergenceReport>,
}

/// Stochastic mirror descent in the dual: y⁽ᵏ⁺¹⁾ = y⁽ᵏ⁾ − t_k·G(∇ψ*(y⁽ᵏ⁾), ξ⁽ᵏ⁾).
pub fn run_lsmd(
    map: &MirrorMap,
    problem: &Problem,
    oracle: &StochasticOracle,
    schedule: &StepSchedule,
    x0: &PrimalVector,
    opts: &RunOptions,
) -> Result<LsmdOutput> {
    lsmd_impl(map, problem, oracle, schedule, x0, opts, "lsmd")
}

/// Deterministic mirror descent (dual form, exact gradients).
pub fn run_md(
    map: &MirrorMap,
    problem: &Problem,
    schedule: &StepSchedule,
    x0: &PrimalVector,
    opts: &RunOptions,
) -> Result<LsmdOutput> {
    let oracle = StochasticOracle::gaussian(0.0, 0);
    lsmd_impl(map, problem, &oracle, schedule, x0, opts, "md")
}

fn lsmd_impl(
    map: &MirrorMap,
    problem: &Problem,
    oracle: &StochasticOracle,
    schedule: &StepSchedule,
    x0: &PrimalVector,
    opts: &RunOptions,
    algorithm: &str,
) -> Result<LsmdOutput> {
    opts.validate()?;
    let k_max = opts.max_iters;
    let meta = TraceMeta {
        algorithm: algorithm.into(),
        map_kind: map.kind_name().into(),
        problem_kind: problem.kind_name().into(),
        seed: oracle.seed,
    };
    let mut meta_erg = meta.clone();
    meta_erg.algorithm = format!("{algorithm}_ergodic");

    let f0 = problem.objective(x0)?;
    let mut rec = Recorder::new(meta, opts, f0);
    let mut erg_trace = Trace::new(meta_erg);

    let mut y = map.forward(x0)?;
    let mut x_cur = x0.clone();
    let mut acc = Array1::<f64>::zeros(x0.len());
    let mut weight_sum = 0.0;
    let mut final_ergodic = x0.clone();

    for k in 0..=k_max {
        let t = schedule.step(k + 1)?;
        if k > 0 {
            x_cur = match map.inverse(&y) {
                Ok(x) => x,
                Err(Error::NonFinite { .. }) => {
                    rec.record_blowup(k, t)?;
                    break;
                }
                Err(e) => return Err(e),
            };
        }
        acc += &(t * &x_cur.0);
        weight_sum += t;
        final_ergodic = PrimalVector(&acc / weight_sum);

        let mut gn = 0.0;
        let mut g = None;
        if k < k_max {
            match oracle.gradient(problem, &x_cur, k as u64) {
                Ok(grad) if all_finite(&grad.0) => {
                    gn = norm(&grad.0);
                    g = Some(grad);
                }
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    rec.record_blowup(k, t)?;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if rec.due(k, k == k_max) {
            let fe = objective_or_nan(problem, &final_ergodic)?;
            erg_trace.push(TraceRow {
                k,
                t,
                f: fe,
                grad_norm: 0.0,
                consistency_error: consistency_or_nan(map, &final_ergodic),
                wall_ns: 0,
            })?;
            let f = objective_or_nan(problem, &x_cur)?;
            if rec.record(k, t, f, gn, consistency_or_nan(map, &x_cur))? {
                break;
            }
        }

        if let Some(grad) = g {
            y.0 -= &(t * &grad.0);
        }
    }

    Ok(LsmdOutput {
        trace: rec.trace,
        ergodic_trace: erg_trace,
        final_x: x_cur,
        final_ergodic,
        diverged: rec.diverged,
    })
}

/// Result of an accelerated stochastic (LASMD) run.
#[derive(Debug, Clone)]
pub struct LasmdOutput {
    pub trace: Trace,
    pub final_x: PrimalVector,
    pub diverged: Option<DivergenceReport>,
}

/// Accelerated stochastic mirror descent (draw index k+1 at loop k).
pub fn run_lasmd(
    map: &MirrorMap,
    problem: &Problem,
    oracle: &StochasticOracle,
    schedule: &StepSchedule,
    x0: &PrimalVector,
    opts: &RunOptions,
) -> Result<LasmdOutput> {
    opts.validate()?;
    let k_max = opts.max_iters;
    let meta = TraceMeta {
        algorithm: "lasmd".into(),
        map_kind: map.kind_name().into(),
        problem_kind: problem.kind_name().into(),
        seed: oracle.seed,
    };
    let f0 = problem.objective(x0)?;
    let mut rec = Recorder::new(meta, opts, f0);
    rec.record(0, schedule.step(1)?, f0, 0.0, consistency_or_nan(map, x0))?;

    let mut state = AsmdState::new(map, x0)?;
    for k in 0..k_max {
        let t = schedule.step(k + 1)?;
        let step_result = state.advance(map, t, |x| {
            oracle.gradient(problem, x, (k + 1) as u64)
        });
        let gn = match step_result {
            Ok(gn) => gn,
            Err(Error::NonFinite { .. }) => {
                rec.record_blowup(k + 1, t)?;
                break;
            }
            Err(e) => return Err(e),
        };
        let kk = k + 1;
        if rec.due(kk, kk == k_max) {
            let f = objective_or_nan(problem, &state.x)?;
            let stop = rec.record(
                kk,
                schedule.step(kk + 1)?,
                f,
                gn,
                consistency_or_nan(map, &state.x),
            )?;
            if stop {
                break;
            }
        }
    }

    Ok(LasmdOutput {
        trace: rec.trace,
        final_x: state.x,
        diverged: rec.diverged,
    })
}

/// Classical reference optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Gd,
    Nesterov,
    Adam,
    Sgd,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Gd => "gd",
            BaselineKind::Nesterov => "nesterov",
            BaselineKind::Adam => "adam",
            BaselineKind::Sgd => "sgd",
        }
    }
}

/// Baseline optimizer configuration; Adam moments default to (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub step: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, step: f64) -> Result<Self> {
        if !step.is_finite() || step <= 0.0 {
            return Err(Error::Config("baseline step must be finite and > 0".into()));
        }
        Ok(BaselineConfig {
            kind,
            step,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        })
    }
}

/// Result of a baseline run.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub trace: Trace,
    pub final_x: PrimalVector,
    pub diverged: Option<DivergenceReport>,
}

/// Runs GD, Nesterov (momentum k/(k+3), gradient at the look-ahead point),
/// Adam (bias-corrected), or SGD.  SGD requires an oracle; for the other
/// kinds an oracle replaces the exact gradient when given.  Row k records
/// f(x⁽ᵏ⁾) and the norm of the gradient driving the step out of k.
pub fn run_baseline(
    problem: &Problem,
    config: &BaselineConfig,
    x0: &PrimalVector,
    oracle: Option<&StochasticOracle>,
    opts: &RunOptions,
) -> Result<BaselineOutput> {
    opts.validate()?;
    if !config.step.is_finite() || config.step <= 0.0 {
        return Err(Error::Config("baseline step must be finite and > 0".into()));
    }
    if config.kind == BaselineKind::Sgd && oracle.is_none() {
        return Err(Error::Config(
            "sgd baseline requires a stochastic oracle".into(),
        ));
    }
    let k_max = opts.max_iters;
    let meta = TraceMeta {
        algorithm: config.kind.name().into(),
        map_kind: "none".into(),
        problem_kind: problem.kind_name().into(),
        seed: oracle.map_or(0, |o| o.seed),
    };
    let f0 = problem.objective(x0)?;
    let mut rec = Recorder::new(meta, opts, f0);

    let gradient = |x: &PrimalVector, draw: u64| -> Result<DualVector> {
        match oracle {
            Some(o) => o.gradient(problem, x, draw),
            None => problem.gradient(x),
        }
    };

    let t = config.step;
    let mut x = x0.clone();
    // Nesterov look-ahead point.
    let mut look = x0.clone();
    // Adam moment accumulators.
    let mut m = Array1::<f64>::zeros(x0.len());
    let mut v = Array1::<f64>::zeros(x0.len());

    for k in 0..=k_max {
        let mut gn = 0.0;
        let mut g = None;
        if k < k_max {
            let eval_at = if config.kind == BaselineKind::Nesterov {
                &look
            } else {
                &x
            };
            match gradient(eval_at, k as u64) {
                Ok(grad) => {
                    if !all_finite(&grad.0) {
                        rec.record_blowup(k, t)?;
                        break;
                    }
                    gn = norm(&grad.0);
                    g = Some(grad);
                }
                Err(Error::NonFinite { .. }) => {
                    rec.record_blowup(k, t)?;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if rec.due(k, k == k_max) {
            let f = objective_or_nan(problem, &x)?;
            if rec.record(k, t, f, gn, 0.0)? {
                break;
            }
        }

        if let Some(grad) = g {
            match config.kind {
                BaselineKind::Gd | BaselineKind::Sgd => {
                    x.0 -= &(t * &grad.0);
                }
                BaselineKind::Nesterov => {
                    let x_next = PrimalVector(&look.0 - &(t * &grad.0));
                    let beta = k as f64 / (k as f64 + 3.0);
                    look = PrimalVector(&x_next.0 + &(beta * (&x_next.0 - &x.0)));
                    x = x_next;
                }
                BaselineKind::Adam => {
                    let kf = (k + 1) as f64;
                    m = config.beta1 * &m + (1.0 - config.beta1) * &grad.0;
                    v = config.beta2 * &v + (1.0 - config.beta2) * (&grad.0 * &grad.0);
                    let m_hat = &m / (1.0 - config.beta1.powf(kf));
                    let v_hat = &v / (1.0 - config.beta2.powf(kf));
                    x.0 -= &(t * &m_hat / (v_hat.mapv(f64::sqrt) + config.eps));
                }
            }
        }
    }

    Ok(BaselineOutput {
        trace: rec.trace,
        final_x: x,
        diverged: rec.diverged,
    })
}
