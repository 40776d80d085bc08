//! Post-processing of optimization runs: trace records, energy functions,
//! convergence-bound checks, empirical rate fits, reference minima and
//! baseline step-size grid searches.
//!
//! The accelerated-run energy is
//! Ẽ⁽ᵏ⁾ = (k²·t_{k−1}/r)·(f(x̃⁽ᵏ⁾) − f*) + r·B_{ψ*}(z⁽ᵏ⁾, ∇ψ(x*))
//! with t₋₁ = 0; under admissible steps (γ ≥ L_R·L_{ψ*},
//! t_k ≤ l_R/(L_f·γ), non-increasing t) it never increases for k ≥ 1.
//! The ergodic-average bound is
//! E[f(x̃₀ᵏ) − f*] ≤ (B_ψ(x*, x⁽⁰⁾) + (σ²/2α)·Σᵢ₌₀ᵏtᵢ²)/(Σᵢ₌₀ᵏtᵢ) + C,
//! where σ² bounds E‖G‖*² and C vanishes for exact maps.

use crate::error::{Error, Result};
use crate::io::format_f64_17;
use crate::mirror_maps::{MirrorMap, PrimalVector};
use crate::optimizers::{
    run_baseline, BaselineConfig, BaselineKind, LamdOutput, RunOptions, StepSchedule,
};
use crate::problems::{Problem, StochasticOracle};
use std::fs;
use std::path::Path;

/// One recorded iteration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Iteration index.
    pub k: usize,
    /// Scheduled step-size t_k at this index (1-based schedule value k+1).
    pub t: f64,
    /// Objective value f(x⁽ᵏ⁾).
    pub f: f64,
    /// Norm of the gradient estimate used in the transition adjacent to k
    /// (0 when no gradient was evaluated for this iterate).
    pub grad_norm: f64,
    /// Forward/inverse round-trip residual of the mirror map at x⁽ᵏ⁾.
    pub consistency_error: f64,
    /// Wall-clock nanoseconds since run start (0 unless timing was enabled).
    pub wall_ns: u64,
}

/// Identifying metadata carried alongside a trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceMeta {
    pub algorithm: String,
    pub map_kind: String,
    pub problem_kind: String,
    pub seed: u64,
}

/// Objective series of a run: rows with strictly increasing k starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    rows: Vec<TraceRow>,
}

/// Header line of every trace CSV.
pub const TRACE_CSV_HEADER: &str = "k,t_k,f,grad_norm,consistency_error,wall_ns";

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        Trace {
            meta,
            rows: Vec::new(),
        }
    }

    /// Appends a row; k must start at 0 and increase strictly.
    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        match self.rows.last() {
            None if row.k != 0 => {
                return Err(Error::Config("trace must start at k = 0".into()));
            }
            Some(prev) if row.k <= prev.k => {
                return Err(Error::Config(format!(
                    "trace rows must have strictly increasing k ({} after {})",
                    row.k, prev.k
                )));
            }
            _ => {}
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Row recorded at iteration k, if any.
    pub fn row_at(&self, k: usize) -> Option<&TraceRow> {
        self.rows
            .binary_search_by_key(&k, |r| r.k)
            .ok()
            .map(|i| &self.rows[i])
    }

    /// Objective value of the last recorded row.
    pub fn final_f(&self) -> Option<f64> {
        self.rows.last().map(|r| r.f)
    }

    /// Serializes to CSV with 17-significant-digit decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.k,
                format_f64_17(r.t),
                format_f64_17(r.f),
                format_f64_17(r.grad_norm),
                format_f64_17(r.consistency_error),
                r.wall_ns
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses a trace CSV; metadata is not stored in the file and defaults.
    pub fn parse_csv(text: &str) -> Result<Trace> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty trace CSV".into()))?;
        if header.trim() != TRACE_CSV_HEADER {
            return Err(Error::Format(format!("bad trace header: {header}")));
        }
        let mut trace = Trace::new(TraceMeta::default());
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!(
                    "trace line {} has {} columns",
                    ln + 2,
                    cols.len()
                )));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))
            };
            trace.push(TraceRow {
                k: cols[0]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?,
                t: parse_f(cols[1])?,
                f: parse_f(cols[2])?,
                grad_norm: parse_f(cols[3])?,
                consistency_error: parse_f(cols[4])?,
                wall_ns: cols[5]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?,
            })?;
        }
        Ok(trace)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Trace> {
        Trace::parse_csv(&fs::read_to_string(path)?)
    }
}

/// Energy value at one iteration, split into its two components.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRecord {
    pub k: usize,
    pub e: f64,
    /// (k²·t_{k−1}/r)·(f(x̃⁽ᵏ⁾) − f*); zero at k = 0 since t₋₁ = 0.
    pub objective_term: f64,
    /// r·B_{ψ*}(z⁽ᵏ⁾, ∇ψ(x*)); always ≥ 0.
    pub bregman_term: f64,
}

/// Energy series of an accelerated run recorded with states.
///
/// Requires the run to have kept per-iteration states; the dual accumulator
/// z⁽ᵏ⁾ recorded by the runner equals ∇ψ(z̃⁽ᵏ⁾), so the Bregman component is
/// evaluated directly in dual coordinates against ∇ψ(x*).
pub fn amd_energy(
    map: &MirrorMap,
    problem: &Problem,
    output: &LamdOutput,
    schedule: &StepSchedule,
    x_star: &PrimalVector,
) -> Result<Vec<EnergyRecord>> {
    let states = output
        .states
        .as_ref()
        .ok_or_else(|| Error::Config("run was not recorded with states".into()))?;
    if states.x_tilde.len() != states.z_dual.len() {
        return Err(Error::Config("inconsistent recorded state lengths".into()));
    }
    let f_star = problem.objective(x_star)?;
    let y_star = map.forward(x_star)?;
    let r = output.r;
    let mut records = Vec::with_capacity(states.x_tilde.len());
    for k in 0..states.x_tilde.len() {
        let objective_term = if k == 0 {
            0.0
        } else {
            let t_prev = schedule.step(k)?;
            let kf = k as f64;
            kf * kf * t_prev / r * (problem.objective(&states.x_tilde[k])? - f_star)
        };
        let bregman_term = r * map.bregman_dual(&states.z_dual[k], &y_star)?;
        records.push(EnergyRecord {
            k,
            e: objective_term + bregman_term,
            objective_term,
            bregman_term,
        });
    }
    Ok(records)
}

/// Serializes energy records as CSV (k, E, obj_term, bregman_term).
pub fn energy_csv(records: &[EnergyRecord]) -> String {
    let mut out = String::from("k,E,obj_term,bregman_term\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.k,
            format_f64_17(r.e),
            format_f64_17(r.objective_term),
            format_f64_17(r.bregman_term)
        ));
    }
    out
}

pub fn write_energy_csv(path: impl AsRef<Path>, records: &[EnergyRecord]) -> Result<()> {
    fs::write(path, energy_csv(records))?;
    Ok(())
}

/// Analytic right-hand side of the ergodic-average bound at iteration k:
/// (b0 + (σ²/2α)·Σᵢ₌₀ᵏtᵢ²)/(Σᵢ₌₀ᵏtᵢ) + c, where b0 = B_ψ(x*, x⁽⁰⁾), σ²
/// bounds the oracle's second moment E‖G‖*², α is the map's strong-convexity
/// constant, and c is the map-approximation offset (0 for exact maps).
pub fn smd_bound_rhs(
    map: &MirrorMap,
    schedule: &StepSchedule,
    sigma: f64,
    b0: f64,
    k: usize,
    c: f64,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("bound index must be ≥ 1".into()));
    }
    let alpha = map.alpha();
    if !(alpha > 0.0) {
        return Err(Error::Config("map strong convexity must be > 0".into()));
    }
    let mut sum_t = 0.0;
    let mut sum_t2 = 0.0;
    for i in 0..=k {
        let t = schedule.step(i + 1)?;
        sum_t += t;
        sum_t2 += t * t;
    }
    Ok((b0 + sigma * sigma / (2.0 * alpha) * sum_t2) / sum_t + c)
}

/// One row of a bound-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheckRow {
    pub k: usize,
    pub measured: f64,
    pub bound_rhs: f64,
    pub pass: bool,
}

/// Serializes bound checks as CSV (k, measured, bound_rhs, pass ∈ {0,1}).
pub fn bound_check_csv(rows: &[BoundCheckRow]) -> String {
    let mut out = String::from("k,measured,bound_rhs,pass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.k,
            format_f64_17(r.measured),
            format_f64_17(r.bound_rhs),
            u8::from(r.pass)
        ));
    }
    out
}

pub fn write_bound_check_csv(path: impl AsRef<Path>, rows: &[BoundCheckRow]) -> Result<()> {
    fs::write(path, bound_check_csv(rows))?;
    Ok(())
}

/// Least-squares slope of log₁₀(f − f*) against log₁₀(k) over rows with
/// k ∈ [k_lo, k_hi] (k = 0 is excluded); gaps are clamped at 1e-15.
pub fn fit_rate(trace: &Trace, f_star: f64, k_lo: usize, k_hi: usize) -> Result<f64> {
    let lo = k_lo.max(1);
    let pts: Vec<(f64, f64)> = trace
        .rows()
        .iter()
        .filter(|r| r.k >= lo && r.k <= k_hi)
        .map(|r| {
            (
                (r.k as f64).log10(),
                (r.f - f_star).max(1e-15).log10(),
            )
        })
        .collect();
    if pts.len() < 10 {
        return Err(Error::Config(format!(
            "rate fit needs at least 10 points in the window, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::Config("degenerate rate-fit window".into()));
    }
    Ok((n * sxy - sx * sy) / denom)
}

/// Iteration counts and steps of the long-gradient-descent reference recipe.
const REFERENCE_PHASES: [(f64, f64); 2] = [(15_000.0, 5e-4), (5_000.0, 1e-4)];

/// Reference minimum f*: closed form where available (quadratics; total
/// variation at λ = 0), otherwise the best value seen along a two-phase
/// gradient-descent run whose iteration counts scale with `budget`.
pub fn reference_minimum(problem: &Problem, budget: f64) -> Result<f64> {
    if !budget.is_finite() || budget <= 0.0 {
        return Err(Error::Config("reference budget must be > 0".into()));
    }
    match problem {
        Problem::Quadratic(q) => return Ok(q.min_value()),
        Problem::TvRestore(tv) if tv.lambda == 0.0 => return Ok(0.0),
        _ => {}
    }
    let mut x = problem.initial_point(0);
    let f0 = problem.objective(&x)?;
    let limit = 1e6 * f0.abs().max(1e-12);
    let mut best = f0;
    let mut k_total = 0;
    let check = 10;
    for (count, t) in REFERENCE_PHASES {
        let n = (count * budget).round() as usize;
        for i in 0..n {
            let g = problem.gradient(&x)?;
            x.0 -= &(t * &g.0);
            k_total += 1;
            if i % check == check - 1 || i + 1 == n {
                let f = problem.objective(&x)?;
                if !f.is_finite() || f > limit {
                    return Err(Error::Divergence {
                        k: k_total,
                        f,
                        limit,
                    });
                }
                if f < best {
                    best = f;
                }
            }
        }
    }
    Ok(best)
}

/// One evaluated grid point; `None` objective values mean the run diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchEntry {
    pub step: f64,
    pub f_eval: Option<f64>,
    pub f_horizon: Option<f64>,
}

/// Outcome of a baseline step-size grid search.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: BaselineConfig,
    /// Objective of the winning run at the evaluation iteration.
    pub best_f: f64,
    pub eval_iteration: usize,
    pub table: Vec<GridSearchEntry>,
}

/// Step values {1,2,5}·10ᵉ inside [lo, hi], ascending.
pub fn step_grid(lo: f64, hi: f64) -> Vec<f64> {
    const DECADES: [f64; 8] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0];
    let mut grid = Vec::new();
    for d in DECADES {
        for m in [1.0, 2.0, 5.0] {
            let v = m * d;
            if v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12) {
                grid.push(v);
            }
        }
    }
    grid
}

/// Default step grid per baseline kind (GD/SGD [2e-4, 1e-1],
/// Adam [1e-3, 1e-1], Nesterov [1e-4, 5e-3]).
pub fn default_step_grid(kind: BaselineKind) -> Vec<f64> {
    match kind {
        BaselineKind::Gd | BaselineKind::Sgd => step_grid(2e-4, 1e-1),
        BaselineKind::Adam => step_grid(1e-3, 1e-1),
        BaselineKind::Nesterov => step_grid(1e-4, 5e-3),
    }
}

/// Runs a baseline at every grid step and returns the one minimizing f at
/// `eval_iteration`; near-ties (1e-12 relative) go to the smaller objective
/// at the 5× horizon.  Diverged runs are excluded.
pub fn grid_search_baseline(
    problem: &Problem,
    kind: BaselineKind,
    grid: &[f64],
    eval_iteration: usize,
    x0: &PrimalVector,
    oracle: Option<&StochasticOracle>,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("step grid must be nonempty".into()));
    }
    if eval_iteration < 1 {
        return Err(Error::Config("evaluation iteration must be ≥ 1".into()));
    }
    let opts = RunOptions::iters(5 * eval_iteration);
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, f64)> = None; // (step, f_eval, f_horizon)
    for &step in grid {
        let config = BaselineConfig::new(kind, step)?;
        let out = run_baseline(problem, &config, x0, oracle, &opts)?;
        let entry = if out.diverged.is_some() {
            GridSearchEntry {
                step,
                f_eval: None,
                f_horizon: None,
            }
        } else {
            let f_eval = out
                .trace
                .row_at(eval_iteration)
                .map(|r| r.f)
                .ok_or_else(|| Error::Config("missing evaluation row".into()))?;
            let f_horizon = out
                .trace
                .final_f()
                .ok_or_else(|| Error::Config("empty grid-search trace".into()))?;
            let better = match best {
                None => true,
                Some((_, bf, bh)) => {
                    let tie = (f_eval - bf).abs() <= 1e-12 * bf.abs().max(1.0);
                    if tie {
                        f_horizon < bh
                    } else {
                        f_eval < bf
                    }
                }
            };
            if better {
                best = Some((step, f_eval, f_horizon));
            }
            GridSearchEntry {
                step,
                f_eval: Some(f_eval),
                f_horizon: Some(f_horizon),
            }
        };
        table.push(entry);
    }
    let (step, f_eval, _) =
        best.ok_or_else(|| Error::Config("every grid step diverged".into()))?;
    Ok(GridSearchResult {
        best: BaselineConfig::new(kind, step)?,
        best_f: f_eval,
        eval_iteration,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::run_lamd;
    use crate::problems::Quadratic;
    use ndarray::Array1;

    fn quadratic(d: Vec<f64>, b: Vec<f64>) -> Problem {
        Problem::Quadratic(Quadratic::new(d, b).unwrap())
    }

    fn synthetic_trace(f: impl Fn(usize) -> f64, k_max: usize) -> Trace {
        let mut t = Trace::new(TraceMeta::default());
        for k in 0..=k_max {
            t.push(TraceRow {
                k,
                t: 0.01,
                f: f(k),
                grad_norm: 0.0,
                consistency_error: 0.0,
                wall_ns: 0,
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn trace_rows_must_increase_from_zero() {
        let mut t = Trace::new(TraceMeta::default());
        let row = |k| TraceRow {
            k,
            t: 0.1,
            f: 1.0,
            grad_norm: 0.0,
            consistency_error: 0.0,
            wall_ns: 0,
        };
        assert!(t.push(row(1)).is_err());
        t.push(row(0)).unwrap();
        t.push(row(2)).unwrap();
        assert!(t.push(row(2)).is_err());
        assert!(t.push(row(1)).is_err());
        assert_eq!(t.row_at(2).unwrap().k, 2);
        assert!(t.row_at(1).is_none());
    }

    #[test]
    fn trace_csv_round_trips_bit_exactly() {
        let mut t = Trace::new(TraceMeta {
            algorithm: "md".into(),
            map_kind: "euclidean".into(),
            problem_kind: "quadratic".into(),
            seed: 7,
        });
        t.push(TraceRow {
            k: 0,
            t: 0.1,
            f: 1.0 / 3.0,
            grad_norm: 2.0_f64.sqrt(),
            consistency_error: 1e-17,
            wall_ns: 12345,
        })
        .unwrap();
        t.push(TraceRow {
            k: 7,
            t: 0.55 / 7.0,
            f: -2.543527374636186e-3,
            grad_norm: 0.0,
            consistency_error: 0.0,
            wall_ns: 99999,
        })
        .unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        let back = Trace::parse_csv(&csv).unwrap();
        assert_eq!(back.rows().len(), 2);
        for (a, b) in t.rows().iter().zip(back.rows()) {
            assert_eq!(a.k, b.k);
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            assert_eq!(a.f.to_bits(), b.f.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
            assert_eq!(a.wall_ns, b.wall_ns);
        }
        assert!(Trace::parse_csv("nope\n1,2\n").is_err());
    }

    #[test]
    fn rate_fit_is_exact_on_power_laws() {
        let t = synthetic_trace(|k| (k.max(1) as f64).powi(-2), 100);
        let slope = fit_rate(&t, 0.0, 1, 100).unwrap();
        assert!((slope + 2.0).abs() < 1e-6, "{slope}");

        let flat = synthetic_trace(|_| 3.0, 100);
        let slope = fit_rate(&flat, 0.0, 1, 100).unwrap();
        assert!(slope.abs() < 1e-12);

        let t32 = synthetic_trace(|k| 5.0 * (k.max(1) as f64).powf(-1.5), 200);
        let slope = fit_rate(&t32, 0.0, 10, 200).unwrap();
        assert!((slope + 1.5).abs() < 1e-9, "{slope}");
    }

    #[test]
    fn rate_fit_requires_ten_points() {
        let t = synthetic_trace(|k| (k.max(1) as f64).recip(), 20);
        assert!(fit_rate(&t, 0.0, 1, 9).is_err());
        assert!(fit_rate(&t, 0.0, 1, 10).is_ok());
    }

    #[test]
    fn slow_gradient_descent_fits_a_steep_early_slope() {
        let problem = quadratic(vec![1.0], vec![0.0]);
        let x0 = PrimalVector::from_vec(vec![1.0]);
        let out = run_baseline(
            &problem,
            &BaselineConfig::new(BaselineKind::Gd, 0.02).unwrap(),
            &x0,
            None,
            &RunOptions::iters(200),
        )
        .unwrap();
        let slope = fit_rate(&out.trace, 0.0, 10, 200).unwrap();
        assert!(slope <= -0.8, "slope {slope}");
    }

    #[test]
    fn ergodic_bound_matches_hand_computation() {
        // σ = 0, t ≡ 0.1 over 100 steps: RHS = b0/Σt = 1/10.
        let map = MirrorMap::euclidean(1);
        let schedule = StepSchedule::fixed(0.1).unwrap();
        let rhs = smd_bound_rhs(&map, &schedule, 0.0, 1.0, 99, 0.0).unwrap();
        assert!((rhs - 0.1).abs() < 1e-15, "{rhs}");
        // The offset term is additive.
        let rhs_c = smd_bound_rhs(&map, &schedule, 0.0, 1.0, 99, 0.25).unwrap();
        assert!((rhs_c - 0.35).abs() < 1e-15);
        // σ contributes (σ²/2α)·Σt²/Σt = 0.04·0.1/2 with α = 1 here.
        let rhs_s = smd_bound_rhs(&map, &schedule, 0.2, 1.0, 99, 0.0).unwrap();
        assert!((rhs_s - (1.0 + 0.02 * 1.0) / 10.0).abs() < 1e-15);
        assert!(smd_bound_rhs(&map, &schedule, 0.0, 1.0, 0, 0.0).is_err());
    }

    #[test]
    fn energy_starts_at_the_bregman_term_alone() {
        let problem = quadratic(vec![2.0], vec![-2.0]); // minimizer x* = 1
        let x_star = PrimalVector::from_vec(vec![1.0]);
        let map = MirrorMap::euclidean(1);
        let schedule = StepSchedule::fixed(0.1).unwrap();
        let mut opts = RunOptions::iters(0);
        opts.record_states = true;

        // Start at the minimizer: Ẽ⁽⁰⁾ = 0.
        let out = run_lamd(&map, &problem, &schedule, 3.0, 1.0, &x_star, None, &opts).unwrap();
        let recs = amd_energy(&map, &problem, &out, &schedule, &x_star).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].objective_term, 0.0);
        assert!(recs[0].e.abs() < 1e-15);

        // Start elsewhere: Ẽ⁽⁰⁾ = r·B_{ψ*}(∇ψ(x⁰), ∇ψ(x*)) = 3·½(x⁰−x*)².
        let x0 = PrimalVector::from_vec(vec![3.0]);
        let out = run_lamd(&map, &problem, &schedule, 3.0, 1.0, &x0, None, &opts).unwrap();
        let recs = amd_energy(&map, &problem, &out, &schedule, &x_star).unwrap();
        assert_eq!(recs[0].objective_term, 0.0);
        assert!((recs[0].e - 3.0 * 0.5 * 4.0).abs() < 1e-12);

        // Without recorded states the energy is unavailable.
        let out = run_lamd(
            &map,
            &problem,
            &schedule,
            3.0,
            1.0,
            &x0,
            None,
            &RunOptions::iters(0),
        )
        .unwrap();
        assert!(amd_energy(&map, &problem, &out, &schedule, &x_star).is_err());
    }

    #[test]
    fn energy_is_monotone_under_admissible_steps() {
        // 100-dim quadratic with curvatures in [0.1, 1]: L_f = 1, and the
        // euclidean map has L_{ψ*} = 1, so γ = 1 and t = 0.02 are admissible.
        let dim = 100;
        let d = Array1::linspace(0.1, 1.0, dim);
        let problem = Problem::Quadratic(Quadratic::new(d.to_vec(), vec![0.0; dim]).unwrap());
        let x_star = PrimalVector(Array1::zeros(dim));
        let x0 = PrimalVector(Array1::ones(dim));
        let map = MirrorMap::euclidean(dim);
        let schedule = StepSchedule::fixed(0.02).unwrap();
        let mut opts = RunOptions::iters(500);
        opts.record_states = true;
        let out = run_lamd(&map, &problem, &schedule, 3.0, 1.0, &x0, None, &opts).unwrap();
        assert!(out.diverged.is_none());
        assert_eq!(out.gamma_admissible, Some(true));

        let recs = amd_energy(&map, &problem, &out, &schedule, &x_star).unwrap();
        assert_eq!(recs.len(), 501);
        for r in &recs {
            assert!(r.bregman_term >= 0.0, "k={} {}", r.k, r.bregman_term);
            assert!(r.e.is_finite());
        }
        for w in recs[1..].windows(2) {
            let slack = 1e-12 * w[0].e.abs().max(1.0);
            assert!(
                w[1].e <= w[0].e + slack,
                "energy rose at k={}: {} -> {}",
                w[1].k,
                w[0].e,
                w[1].e
            );
        }
    }

    #[test]
    fn energy_csv_has_component_columns() {
        let recs = vec![EnergyRecord {
            k: 0,
            e: 1.5,
            objective_term: 0.0,
            bregman_term: 1.5,
        }];
        let csv = energy_csv(&recs);
        assert!(csv.starts_with("k,E,obj_term,bregman_term\n"));
        assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
    }

    #[test]
    fn bound_check_csv_uses_binary_pass_flags() {
        let rows = vec![
            BoundCheckRow {
                k: 100,
                measured: 0.05,
                bound_rhs: 0.1,
                pass: true,
            },
            BoundCheckRow {
                k: 200,
                measured: 0.2,
                bound_rhs: 0.1,
                pass: false,
            },
        ];
        let csv = bound_check_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,measured,bound_rhs,pass");
        assert!(lines[1].ends_with(",1"));
        assert!(lines[2].ends_with(",0"));
    }

    #[test]
    fn reference_minimum_matches_closed_forms() {
        let problem = quadratic(vec![1.0, 4.0], vec![1.0, -2.0]);
        let f_star = reference_minimum(&problem, 1.0).unwrap();
        // f* = −½Σbᵢ²/dᵢ = −½(1 + 1) = −1.
        assert!((f_star - (-1.0)).abs() < 1e-12);

        let y = ndarray::Array2::from_shape_fn((4, 4), |(i, j)| 0.1 * (i + j) as f64);
        let tv = Problem::TvRestore(crate::problems::TvRestore::denoise(y, 0.0).unwrap());
        assert_eq!(reference_minimum(&tv, 1.0).unwrap(), 0.0);

        assert!(reference_minimum(&problem, 0.0).is_err());
    }

    #[test]
    fn reference_recipe_is_self_consistent_under_budget_doubling() {
        // A ramp image keeps every pixel difference far from the smoothing
        // width at the optimum, so the recipe settles well below tolerance.
        let y = ndarray::Array2::from_shape_fn((8, 8), |(i, j)| {
            0.02 + 0.1 * i as f64 + 0.07 * j as f64
        });
        let tv = Problem::TvRestore(crate::problems::TvRestore::denoise(y, 0.15).unwrap());
        let f1 = reference_minimum(&tv, 1.0).unwrap();
        let f2 = reference_minimum(&tv, 2.0).unwrap();
        assert!(
            (f1 - f2).abs() <= 1e-6 * f1.abs().max(1.0),
            "f1={f1} f2={f2}"
        );
    }

    #[test]
    fn default_grids_reproduce_published_ranges() {
        let gd = default_step_grid(BaselineKind::Gd);
        assert!((gd.first().unwrap() - 2e-4).abs() < 1e-18);
        assert!((gd.last().unwrap() - 1e-1).abs() < 1e-15);
        assert_eq!(gd.len(), 9);
        let adam = default_step_grid(BaselineKind::Adam);
        assert!((adam.first().unwrap() - 1e-3).abs() < 1e-18);
        assert!((adam.last().unwrap() - 1e-1).abs() < 1e-15);
        let nag = default_step_grid(BaselineKind::Nesterov);
        assert!((nag.first().unwrap() - 1e-4).abs() < 1e-19);
        assert!((nag.last().unwrap() - 5e-3).abs() < 1e-17);
        assert_eq!(nag.len(), 6);
        // Ascending with the {1,2,5} mantissa pattern.
        assert!(gd.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_search_picks_the_contraction_optimum() {
        // f = ½·10·x²: GD contraction |1 − 10t| vanishes at the grid point 0.1.
        let problem = quadratic(vec![10.0], vec![0.0]);
        let x0 = PrimalVector::from_vec(vec![1.0]);
        let grid = default_step_grid(BaselineKind::Gd);
        let res =
            grid_search_baseline(&problem, BaselineKind::Gd, &grid, 100, &x0, None).unwrap();
        assert_eq!(res.best.step, 0.1);
        assert!(res.best_f <= 1e-15);
        assert_eq!(res.table.len(), grid.len());

        // Single-point grid returns that point.
        let res =
            grid_search_baseline(&problem, BaselineKind::Gd, &[0.005], 100, &x0, None).unwrap();
        assert_eq!(res.best.step, 0.005);
    }

    #[test]
    fn grid_search_excludes_diverging_steps() {
        let problem = quadratic(vec![10.0], vec![0.0]);
        let x0 = PrimalVector::from_vec(vec![1.0]);
        // t = 0.5 gives contraction factor 4: diverges; t = 0.05 converges.
        let res =
            grid_search_baseline(&problem, BaselineKind::Gd, &[0.5, 0.05], 100, &x0, None)
                .unwrap();
        assert_eq!(res.best.step, 0.05);
        assert_eq!(res.table[0].f_eval, None);
        assert!(
            grid_search_baseline(&problem, BaselineKind::Gd, &[0.5, 0.9], 100, &x0, None)
                .is_err()
        );
    }

    #[test]
    fn tuned_momentum_beats_tuned_descent_at_the_eval_iteration() {
        // Ill-conditioned 10-dim quadratic; both methods get the same grid.
        let dim = 10;
        let d = Array1::linspace(0.01, 1.0, dim);
        let problem = Problem::Quadratic(Quadratic::new(d.to_vec(), vec![0.0; dim]).unwrap());
        let x0 = PrimalVector(Array1::ones(dim));
        let grid = step_grid(1e-3, 1.0);
        let gd =
            grid_search_baseline(&problem, BaselineKind::Gd, &grid, 100, &x0, None).unwrap();
        let nag =
            grid_search_baseline(&problem, BaselineKind::Nesterov, &grid, 100, &x0, None)
                .unwrap();
        assert!(
            nag.best_f < gd.best_f,
            "nesterov {} vs gd {}",
            nag.best_f,
            gd.best_f
        );
    }
}
