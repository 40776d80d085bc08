//! Acceptance gate: one test per shipping criterion, each printing a single
//! `criterion NN [name]: PASS/FAIL/SKIP — detail` line (visible under
//! `cargo test --test acceptance -- --nocapture`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mirror_opt::diagnostics::{
    amd_energy, fit_rate, smd_bound_rhs, Trace, TraceMeta, TraceRow,
};
use mirror_opt::equivariance::{
    build_tying_schema, check_equivariance, contract_tied, expand_tied, grouping_statistic,
    Architecture, ContractMode, GroupElement,
};
use mirror_opt::io::{read_idx_images, read_idx_labels};
use mirror_opt::meta_training::{
    finite_difference_oracle, meta_gradient, sample_batch, train_map, InLoopAlgorithm, MapInit,
    MetaTrainConfig, ProblemFamily,
};
use mirror_opt::mirror_maps::{
    DualVector, MirrorMap, PrimalVector, SplineMap, SPLINE_INCREMENTS,
};
use mirror_opt::optimizers::{
    run_baseline, run_lamd, run_lasmd, run_lsmd, run_md, BaselineConfig, BaselineKind,
    ExtensionRule, RunOptions, StepSchedule,
};
use mirror_opt::problems::{
    make_moons, sample_quadratic_family, BinaryMlp, CnnClassify, MlpClassify, Problem, Quadratic,
    StochasticOracle, SvmHinge, MLP_LAYERS,
};

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n:02} [{name}]: {status} — {detail}");
    assert!(ok, "criterion {n:02} [{name}] failed: {detail}");
}

fn skip(n: u32, name: &str, detail: &str) {
    println!("criterion {n:02} [{name}]: SKIP — {detail}");
}

fn budget(n: u32, name: &str, elapsed: f64, limit: f64) {
    assert!(
        elapsed < limit,
        "criterion {n:02} [{name}] exceeded its runtime budget: {elapsed:.1}s ≥ {limit}s"
    );
}

fn constant(t: f64) -> StepSchedule {
    StepSchedule::new(vec![t], ExtensionRule::ConstantMean).unwrap()
}

fn warped_spline(dim: usize) -> MirrorMap {
    let u: Vec<f64> = (0..SPLINE_INCREMENTS)
        .map(|j| 0.5 * (j as f64).sin() - 3.0)
        .collect();
    MirrorMap::spline(SplineMap::from_increment_params(&u).unwrap(), dim)
}

fn linf(a: &PrimalVector, b: &PrimalVector) -> f64 {
    a.0.iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_exact_inverse_round_trips() {
    let t0 = Instant::now();
    let dim = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.2..5.0)).collect();
    let maps = [
        MirrorMap::euclidean(dim),
        MirrorMap::diagonal(d).unwrap(),
        warped_spline(dim),
    ];
    let mut worst = 0.0f64;
    for map in &maps {
        for _ in 0..1000 {
            let x = PrimalVector::from_vec((0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let back = map.inverse(&map.forward(&x).unwrap()).unwrap();
            worst = worst.max(linf(&back, &x));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "exact inverse round-trips",
        worst <= 1e-10,
        &format!("3 map kinds × 1000 round-trips, worst ‖∇ψ*(∇ψ(x)) − x‖∞ = {worst:.3e} (≤ 1e-10), {secs:.2}s"),
    );
    budget(1, "exact inverse round-trips", secs, 5.0);
}

#[test]
fn criterion_02_reductions_to_classical_methods() {
    let t0 = Instant::now();
    let diag: Vec<f64> = (0..10).map(|i| 0.2 + 0.08 * i as f64).collect();
    let q = sample_quadratic_family(&diag, 2).unwrap();
    let problem = Problem::Quadratic(q);
    let x0 = problem.initial_point(0);
    let opts = RunOptions::iters(200);
    let sched = constant(0.05);

    // Identity-map descent is plain gradient descent.
    let md = run_md(&MirrorMap::euclidean(10), &problem, &sched, &x0, &opts).unwrap();
    let gd = run_baseline(
        &problem,
        &BaselineConfig {
            kind: BaselineKind::Gd,
            step: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &x0,
        None,
        &opts,
    )
    .unwrap();
    let mut gd_gap = 0.0f64;
    for (a, b) in md.trace.rows().iter().zip(gd.trace.rows()) {
        assert_eq!(a.k, b.k);
        gd_gap = gd_gap.max((a.f - b.f).abs());
    }

    // A zero-noise stochastic run is the deterministic dual-form run.
    let spline = warped_spline(10);
    let md_s = run_md(&spline, &problem, &sched, &x0, &opts).unwrap();
    let oracle = StochasticOracle::gaussian(0.0, 9);
    let lsmd = run_lsmd(&spline, &problem, &oracle, &sched, &x0, &opts).unwrap();
    let mut noise_gap = 0.0f64;
    for (a, b) in md_s.trace.rows().iter().zip(lsmd.trace.rows()) {
        noise_gap = noise_gap.max((a.f - b.f).abs());
    }

    // Dual-form iterates equal primal prox-mapping iterates on an exact map.
    let mut x_primal = x0.clone();
    let mut y_dual = spline.forward(&x0).unwrap();
    let mut primal_gap = 0.0f64;
    for _ in 0..200 {
        let x_dual = spline.inverse(&y_dual).unwrap();
        let g = problem.gradient(&x_dual).unwrap();
        y_dual.0 -= &(0.05 * &g.0);

        let gp = problem.gradient(&x_primal).unwrap();
        let step = DualVector(0.05 * &gp.0);
        x_primal = spline.prox_mapping(&x_primal, &step).unwrap();

        let x_dual_next = spline.inverse(&y_dual).unwrap();
        primal_gap = primal_gap.max(linf(&x_dual_next, &x_primal));
    }

    let secs = t0.elapsed().as_secs_f64();
    report(
        2,
        "reductions to classical methods",
        gd_gap <= 1e-12 && noise_gap <= 1e-12 && primal_gap <= 1e-9,
        &format!("identity-map vs GD {gd_gap:.3e} (≤ 1e-12), σ=0 stochastic vs deterministic {noise_gap:.3e} (≤ 1e-12), dual vs primal iterates {primal_gap:.3e} (≤ 1e-9) over 200 steps, {secs:.2}s"),
    );
    budget(2, "reductions to classical methods", secs, 10.0);
}

#[test]
fn criterion_03_accelerated_convergence_rates() {
    let t0 = Instant::now();
    let diag: Vec<f64> = (0..100).map(|i| 0.1 + 0.9 * i as f64 / 99.0).collect();
    let q = sample_quadratic_family(&diag, 3).unwrap();
    let f_star = q.min_value();
    let problem = Problem::Quadratic(q);
    let x0 = problem.initial_point(0);
    let map = MirrorMap::euclidean(100);
    let opts = RunOptions::iters(2000);

    let lamd = run_lamd(&map, &problem, &constant(0.02), 3.0, 1.0, &x0, None, &opts).unwrap();
    assert!(lamd.diverged.is_none());
    let s_lamd = fit_rate(&lamd.trace, f_star, 100, 2000).unwrap();

    let oracle = StochasticOracle::gaussian(0.0, 1);
    let lasmd = run_lasmd(&map, &problem, &oracle, &constant(0.5), &x0, &opts).unwrap();
    assert!(lasmd.diverged.is_none());
    let s_lasmd = fit_rate(&lasmd.trace, f_star, 100, 2000).unwrap();

    let md = run_md(&map, &problem, &constant(0.05), &x0, &opts).unwrap();
    assert!(md.diverged.is_none());
    let s_md = fit_rate(&md.trace, f_star, 100, 2000).unwrap();

    let secs = t0.elapsed().as_secs_f64();
    report(
        3,
        "accelerated convergence rates",
        s_lamd <= -1.8 && s_lasmd <= -1.8 && s_md <= -0.8,
        &format!("100-dim quadratic, log-log slopes on k ∈ [100, 2000]: accelerated {s_lamd:.2} (≤ −1.8), accelerated σ=0 stochastic {s_lasmd:.2} (≤ −1.8), plain descent {s_md:.2} (≤ −0.8), {secs:.2}s"),
    );
    budget(3, "accelerated convergence rates", secs, 60.0);
}

#[test]
fn criterion_04_energy_monotone_decrease() {
    let t0 = Instant::now();
    let diag: Vec<f64> = (0..100).map(|i| 0.1 + 0.9 * i as f64 / 99.0).collect();
    let q = sample_quadratic_family(&diag, 3).unwrap();
    let x_star = PrimalVector(-&q.b / &q.d);
    let problem = Problem::Quadratic(q);
    let x0 = problem.initial_point(0);
    let map = MirrorMap::euclidean(100);
    let sched = constant(0.02);
    let mut opts = RunOptions::iters(501);
    opts.record_states = true;

    let out = run_lamd(&map, &problem, &sched, 3.0, 1.0, &x0, None, &opts).unwrap();
    assert!(out.diverged.is_none());
    let admissible = out.gamma_admissible == Some(true);
    let energy = amd_energy(&map, &problem, &out, &sched, &x_star).unwrap();
    assert!(energy.len() >= 502);
    let mut max_diff = f64::NEG_INFINITY;
    for k in 1..=500 {
        max_diff = max_diff.max(energy[k + 1].e - energy[k].e);
    }

    let secs = t0.elapsed().as_secs_f64();
    report(
        4,
        "energy monotone decrease",
        admissible && max_diff <= 1e-12,
        &format!("admissible (γ, t) accelerated run: max Ẽ(k+1) − Ẽ(k) over k ∈ [1, 500] is {max_diff:.3e} (≤ 1e-12), {secs:.2}s"),
    );
    budget(4, "energy monotone decrease", secs, 30.0);
}

#[test]
fn criterion_05_ergodic_average_bound() {
    let t0 = Instant::now();
    let problem = Problem::Quadratic(Quadratic::new(vec![1.0], vec![0.0]).unwrap());
    let map = MirrorMap::euclidean(1);
    let x0 = problem.initial_point(0);
    let x_star = PrimalVector::from_vec(vec![0.0]);
    let schedule =
        StepSchedule::with_divisor(vec![0.01; 10], ExtensionRule::Reciprocal, false).unwrap();
    let opts = RunOptions::iters(2000);
    let checkpoints = [100usize, 1000, 2000];

    // σ in the bound must dominate the oracle's second moment; the largest
    // gradient draw observed across every run is a valid empirical envelope.
    let mut sum_gap = [0.0f64; 3];
    let mut sigma_sq = 0.0f64;
    for seed in 0..50u64 {
        let oracle = StochasticOracle::gaussian(0.05, seed);
        let out = run_lsmd(&map, &problem, &oracle, &schedule, &x0, &opts).unwrap();
        assert!(out.diverged.is_none());
        for row in out.trace.rows() {
            sigma_sq = sigma_sq.max(row.grad_norm * row.grad_norm);
        }
        for (i, &k) in checkpoints.iter().enumerate() {
            let row = out.ergodic_trace.rows().iter().find(|r| r.k == k).unwrap();
            sum_gap[i] += row.f; // f* = 0 for this instance
        }
    }
    let b0 = map.bregman(&x_star, &x0).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &k) in checkpoints.iter().enumerate() {
        let mean = sum_gap[i] / 50.0;
        let rhs = smd_bound_rhs(&map, &schedule, sigma_sq.sqrt(), b0, k, 0.0).unwrap();
        ok &= mean <= rhs;
        parts.push(format!("k={k}: {mean:.4} ≤ {rhs:.4}"));
    }

    let secs = t0.elapsed().as_secs_f64();
    report(
        5,
        "ergodic average bound",
        ok,
        &format!("50-seed mean ergodic gap vs analytic bound (σ = 0.05 noise, reciprocal steps): {}, {secs:.2}s", parts.join(", ")),
    );
    budget(5, "ergodic average bound", secs, 60.0);
}

#[test]
fn criterion_06_stochastic_noise_floor() {
    let t0 = Instant::now();
    let problem = Problem::Quadratic(Quadratic::new(vec![1.0], vec![0.0]).unwrap());
    let map = MirrorMap::euclidean(1);
    let x0 = problem.initial_point(0);
    let sched = constant(3.0);
    let mut opts = RunOptions::iters(100_000);
    opts.objective_stride = 10;

    // Noisy branch: seed-averaged gap curve, fitted over the late window.
    let n_seeds = 20u64;
    let mut mean_f: Vec<(usize, f64)> = Vec::new();
    for seed in 0..n_seeds {
        let oracle = StochasticOracle::gaussian(0.05, seed);
        let out = run_lasmd(&map, &problem, &oracle, &sched, &x0, &opts).unwrap();
        assert!(out.diverged.is_none(), "noisy run diverged at seed {seed}");
        if mean_f.is_empty() {
            mean_f = out.trace.rows().iter().map(|r| (r.k, r.f)).collect();
        } else {
            for (acc, row) in mean_f.iter_mut().zip(out.trace.rows()) {
                assert_eq!(acc.0, row.k);
                acc.1 += row.f;
            }
        }
    }
    let mut avg = Trace::new(TraceMeta {
        algorithm: "lasmd_mean".into(),
        map_kind: "euclidean".into(),
        problem_kind: "quadratic".into(),
        seed: 0,
    });
    for &(k, f) in &mean_f {
        avg.push(TraceRow {
            k,
            t: 3.0,
            f: f / n_seeds as f64,
            grad_norm: 0.0,
            consistency_error: 0.0,
            wall_ns: 0,
        })
        .unwrap();
    }
    let s_noisy = fit_rate(&avg, 0.0, 1000, 100_000).unwrap();

    // Clean branch: zero noise recovers the accelerated rate.
    let oracle0 = StochasticOracle::gaussian(0.0, 0);
    let out0 = run_lasmd(&map, &problem, &oracle0, &sched, &x0, &opts).unwrap();
    assert!(out0.diverged.is_none());
    let s_clean = fit_rate(&out0.trace, 0.0, 1000, 100_000).unwrap();

    let secs = t0.elapsed().as_secs_f64();
    report(
        6,
        "stochastic noise floor",
        (-0.7..=-0.3).contains(&s_noisy) && s_clean <= -1.8,
        &format!("accelerated stochastic 1-D quadratic over k ∈ [10³, 10⁵]: σ = 0.05 slope {s_noisy:.2} (in [−0.7, −0.3], 20-seed mean), σ = 0 slope {s_clean:.2} (≤ −1.8), {secs:.2}s"),
    );
    budget(6, "stochastic noise floor", secs, 120.0);
}

#[test]
fn criterion_07_meta_gradient_against_finite_differences() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let mut check = |rev: &mirror_opt::meta_training::MetaGradient,
                     fd: &mirror_opt::meta_training::MetaGradient| {
        for (a, b) in rev
            .map_grad
            .iter()
            .zip(&fd.map_grad)
            .chain(rev.step_grad.iter().zip(&fd.step_grad))
        {
            worst = worst.max((a - b).abs() / b.abs().max(1e-6));
        }
        cases += 1;
    };

    let family = ProblemFamily::QuadraticDiag {
        diag: vec![1.0, 2.0, 5.0],
    };
    let maps = [
        MirrorMap::euclidean(3),
        MirrorMap::diagonal(vec![0.8, 1.5, 3.0]).unwrap(),
        warped_spline(3),
    ];
    let sch = StepSchedule::new(vec![0.1; 10], ExtensionRule::Reciprocal).unwrap();
    for algorithm in [InLoopAlgorithm::LmdDual, InLoopAlgorithm::Lamd] {
        for map in &maps {
            let mut cfg =
                MetaTrainConfig::new(family.clone(), MapInit::Euclidean, vec![0.1; 10]);
            cfg.algorithm = algorithm;
            cfg.init_batch = 3;
            let samples = sample_batch(&cfg).unwrap();
            let rev = meta_gradient(&cfg, map, &sch, &samples).unwrap();
            let fd = finite_difference_oracle(&cfg, map, &sch, &samples, 1e-5).unwrap();
            check(&rev, &fd);
        }
    }

    // Minibatched in-loop oracle on a data-driven problem.
    let (data, labels) = make_moons(24, 0.08, 5);
    let problem = Problem::SvmHinge(SvmHinge::new(data, labels, 1.0).unwrap());
    let mut cfg = MetaTrainConfig::new(
        ProblemFamily::Fixed(problem),
        MapInit::Euclidean,
        vec![0.05; 10],
    );
    cfg.algorithm = InLoopAlgorithm::Lsmd;
    cfg.batch_size = Some(8);
    cfg.init_batch = 2;
    cfg.seed = 11;
    let samples = sample_batch(&cfg).unwrap();
    let map = MirrorMap::diagonal(vec![1.2, 0.9, 1.0]).unwrap();
    let sch_mb = StepSchedule::new(vec![0.05; 10], ExtensionRule::Reciprocal).unwrap();
    let rev = meta_gradient(&cfg, &map, &sch_mb, &samples).unwrap();
    let fd = finite_difference_oracle(&cfg, &map, &sch_mb, &samples, 1e-5).unwrap();
    check(&rev, &fd);

    let secs = t0.elapsed().as_secs_f64();
    report(
        7,
        "meta-gradient vs finite differences",
        worst <= 1e-3,
        &format!("{cases} cases (3 map kinds × 2 unrolled algorithms + minibatched), 10-step unrolls, worst relative error {worst:.3e} (≤ 1e-3), {secs:.2}s"),
    );
    budget(7, "meta-gradient vs finite differences", secs, 60.0);
}

#[test]
fn criterion_08_preconditioner_recovery() {
    let t0 = Instant::now();
    let target = [1.0, 10.0, 100.0];
    let mut cfg = MetaTrainConfig::new(
        ProblemFamily::QuadraticDiag {
            diag: target.to_vec(),
        },
        MapInit::diagonal_ones(3),
        vec![0.01; 10],
    );
    cfg.init_batch = 8;
    cfg.meta_step = 0.5;
    cfg.meta_iters = 400;
    let out = train_map(&cfg).unwrap();
    let d = match &out.map {
        MirrorMap::DiagonalQuadratic { d } => d.clone(),
        other => panic!("trained map kept its kind: {}", other.kind_name()),
    };
    // The ideal weighting is proportional to the curvature, so compare after
    // normalizing both to their first entry.
    let mut max_rel = 0.0f64;
    for i in 0..3 {
        let got = d[i] / d[0];
        let want = target[i] / target[0];
        max_rel = max_rel.max((got - want).abs() / want);
    }

    let secs = t0.elapsed().as_secs_f64();
    report(
        8,
        "preconditioner recovery",
        max_rel <= 0.10,
        &format!("diag(1, 10, 100) quadratic family: normalized learned weights [{:.3}, {:.3}, {:.3}], max relative error {:.2}% (≤ 10%), {secs:.2}s", d[0] / d[0], d[1] / d[0], d[2] / d[0], 100.0 * max_rel),
    );
    budget(8, "preconditioner recovery", secs, 120.0);
}

#[test]
fn criterion_09_equivariance_and_tying_counts() {
    let t0 = Instant::now();

    // Gradient steps commute with hidden-unit permutations.
    let (data, labels) = make_moons(40, 0.1, 11);
    let problem = Problem::BinaryMlp(BinaryMlp {
        data,
        labels,
        hidden: 50,
    });
    let arch = Architecture::from_problem(&problem).unwrap();
    let layers = arch.layers().unwrap().to_vec();
    let z0 = problem.initial_point(1);
    let step = |z: &PrimalVector| -> mirror_opt::error::Result<PrimalVector> {
        let g = problem.gradient(z)?;
        Ok(PrimalVector(&z.0 - &(0.05 * &g.0)))
    };
    let mut max_residual = 0.0f64;
    for seed in 0..100u64 {
        let g = GroupElement::sample(&layers, seed).unwrap();
        max_residual = max_residual.max(check_equivariance(&step, &g, &z0).unwrap());
    }

    // Orbit counts of the three tying schemas.
    let dense = build_tying_schema(&arch).unwrap();
    let conv = build_tying_schema(&Architecture::ConvClassifier).unwrap();
    let kernel_indices: usize = conv
        .labels
        .iter()
        .zip(&conv.orbits)
        .filter(|(l, _)| l.contains("kernel"))
        .map(|(_, o)| o.len())
        .sum();
    let conv_orbits = conv
        .labels
        .iter()
        .filter(|l| l.contains("conv"))
        .count();
    let deep = build_tying_schema(&Architecture::DenseTensorTied {
        layers: MLP_LAYERS.to_vec(),
    })
    .unwrap();
    let spline_params = deep.orbit_count() * SPLINE_INCREMENTS;

    let counts_ok = dense.total_dim == 201
        && dense.orbit_count() == 5
        && kernel_indices == 72
        && conv_orbits == 10
        && conv.orbit_count() == 30
        && spline_params == 400;

    let secs = t0.elapsed().as_secs_f64();
    report(
        9,
        "equivariance and tying counts",
        max_residual <= 1e-9 && counts_ok,
        &format!("gradient-step residual over 100 sampled permutations {max_residual:.3e} (≤ 1e-9); 201 weights → {} orbits, 72 kernel weights within {} conv orbits of {} total, {} per-tensor spline parameters, {secs:.2}s", dense.orbit_count(), conv_orbits, conv.orbit_count(), spline_params),
    );
    budget(9, "equivariance and tying counts", secs, 30.0);
}

#[test]
fn criterion_10_moons_weight_grouping() {
    let t0 = Instant::now();
    let (data, labels) = make_moons(100, 0.1, 7);
    let problem = Problem::BinaryMlp(BinaryMlp {
        data,
        labels,
        hidden: 50,
    });
    let arch = Architecture::from_problem(&problem).unwrap();
    let schema = build_tying_schema(&arch).unwrap();
    let family = ProblemFamily::Fixed(problem);
    let steps = vec![0.15; 15];
    let schedule = StepSchedule::new(steps.clone(), ExtensionRule::Reciprocal).unwrap();
    let mut cfg = MetaTrainConfig::new(family.clone(), MapInit::diagonal_ones(201), steps);
    cfg.algorithm = InLoopAlgorithm::LmdDual;

    // Untied component-wise weighting trained from the identity by
    // stochastic meta-descent over fresh initialization draws; annealing the
    // meta-step concentrates each orbit around its population value.
    let mut w = vec![0.0f64; 201];
    let mut draw = 0u64;
    for m in 0..500 {
        let map = MirrorMap::diagonal(w.iter().map(|v| v.exp()).collect()).unwrap();
        let samples: Vec<_> = (0..24)
            .map(|_| {
                draw += 1;
                family.sample(1000 + draw).unwrap()
            })
            .collect();
        let g = meta_gradient(&cfg, &map, &schedule, &samples).unwrap();
        let step = 0.4 / (1.0 + m as f64 / 40.0);
        for (wi, gi) in w.iter_mut().zip(&g.map_grad) {
            *wi -= step * gi;
        }
    }
    let d = PrimalVector::from_vec(w.iter().map(|v| v.exp()).collect());
    let stats = grouping_statistic(&schema, &d).unwrap();

    // First-layer weightings split by input coordinate: the two row-block
    // orbits must form disjoint value ranges.
    let a1_values = |o: usize| -> (f64, f64) {
        let vals: Vec<f64> = schema.orbits[o].iter().map(|&i| d.0[i]).collect();
        (
            vals.iter().cloned().fold(f64::INFINITY, f64::min),
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (lo0, hi0) = a1_values(0);
    let (lo1, hi1) = a1_values(1);
    let (m0, s0) = stats.per_orbit[0];
    let (m1, s1) = stats.per_orbit[1];
    let gap = if m0 > m1 { lo0 - hi1 } else { lo1 - hi0 };
    let separation = (m0 - m1).abs() / s0.max(s1).max(1e-12);

    let secs = t0.elapsed().as_secs_f64();
    report(
        10,
        "moons weight grouping",
        stats.ratio <= 0.2 && gap > 0.0 && separation > 4.0,
        &format!("untied 201-weight training from identity: grouping ratio {:.3} (≤ 0.2); first-layer orbits split by input coordinate with means {m0:.4} vs {m1:.4} ({separation:.1}× within-orbit spread, value-range gap {gap:.4}), {secs:.1}s", stats.ratio),
    );
    budget(10, "moons weight grouping", secs, 300.0);
}

// ---------------------------------------------------------------------------
// Desk-scale image-classification comparison, gated on user-supplied data.
// ---------------------------------------------------------------------------

fn mnist_files() -> Option<(PathBuf, PathBuf)> {
    let dirs: Vec<PathBuf> = match std::env::var_os("MIRROR_OPT_MNIST_DIR") {
        Some(d) => vec![PathBuf::from(d)],
        None => vec![Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")],
    };
    for dir in dirs {
        for (im, lb) in [
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
        ] {
            let (pi, pl) = (dir.join(im), dir.join(lb));
            if pi.is_file() && pl.is_file() {
                return Some((pi, pl));
            }
        }
    }
    None
}

/// 2×2 mean-pools 28×28 rows down to 14×14.
fn downsample_half(images: &Array2<f64>) -> Array2<f64> {
    let n = images.nrows();
    let mut out = Array2::zeros((n, 196));
    for i in 0..n {
        for r in 0..14 {
            for c in 0..14 {
                let mut acc = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        acc += images[(i, (2 * r + dr) * 28 + (2 * c + dc))];
                    }
                }
                out[(i, r * 14 + c)] = acc / 4.0;
            }
        }
    }
    out
}

fn trace_f_at(trace: &Trace, k: usize) -> f64 {
    trace
        .rows()
        .iter()
        .find(|r| r.k == k)
        .unwrap_or_else(|| panic!("trace has no row at k = {k}"))
        .f
}

#[test]
fn criterion_11_image_classifier_comparison() {
    let name = "image classifier comparison";
    let Some((images_path, labels_path)) = mnist_files() else {
        skip(
            11,
            name,
            "MNIST IDX files not found (set MIRROR_OPT_MNIST_DIR or place train-images-idx3-ubyte / train-labels-idx1-ubyte under ./data)",
        );
        return;
    };
    let t0 = Instant::now();
    let images = read_idx_images(&images_path).unwrap();
    let labels_u8 = read_idx_labels(&labels_path).unwrap();
    assert_eq!(images.nrows(), labels_u8.len());
    assert_eq!(images.ncols(), 784, "expected 28×28 MNIST images");
    assert!(
        images.nrows() >= 1000,
        "need at least 1000 training examples for the epoch protocol"
    );

    // --- Fully connected branch: learned spline map vs SGD -----------------
    let n_mlp = images.nrows().min(10_000);
    let mlp_problem = Problem::MlpClassify(MlpClassify {
        data: images.slice(ndarray::s![..n_mlp, ..]).to_owned(),
        labels: labels_u8[..n_mlp].iter().map(|&l| l as usize).collect(),
        layers: MLP_LAYERS.to_vec(),
    });
    let steps_per_epoch = n_mlp / 500;
    let horizon = 3 * steps_per_epoch;

    let mut cfg = MetaTrainConfig::new(
        ProblemFamily::Fixed(mlp_problem.clone()),
        MapInit::spline_identity(),
        vec![0.1; 10],
    );
    cfg.algorithm = InLoopAlgorithm::Lsmd;
    cfg.batch_size = Some(100);
    cfg.rule = ExtensionRule::ConstantMean;
    cfg.init_batch = 3;
    cfg.meta_step = 0.25;
    cfg.meta_iters = 25;
    let trained = train_map(&cfg).unwrap();

    let mut opts = RunOptions::iters(horizon);
    opts.objective_stride = (steps_per_epoch / 2).max(1);
    let checkpoints: Vec<usize> = (2..=6).map(|j| j * steps_per_epoch / 2).collect();
    let warm = checkpoints[0];
    let mut lmd_mean = vec![0.0f64; checkpoints.len()];
    let mut sgd_mean = vec![0.0f64; checkpoints.len()];
    let eval_seeds = 3u64;
    for seed in 0..eval_seeds {
        let x0 = mlp_problem.initial_point(100 + seed);
        let oracle = StochasticOracle::minibatch(500, 1234 + seed);
        let lmd = run_lsmd(&trained.map, &mlp_problem, &oracle, &trained.schedule, &x0, &opts).unwrap();
        assert!(lmd.diverged.is_none());
        let sgd = run_baseline(
            &mlp_problem,
            &BaselineConfig {
                kind: BaselineKind::Sgd,
                step: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &x0,
            Some(&oracle),
            &opts,
        )
        .unwrap();
        for (i, &k) in checkpoints.iter().enumerate() {
            lmd_mean[i] += trace_f_at(&lmd.trace, k) / eval_seeds as f64;
            sgd_mean[i] += trace_f_at(&sgd.trace, k) / eval_seeds as f64;
        }
    }
    let mlp_ok = lmd_mean.iter().zip(&sgd_mean).all(|(a, b)| a < b);

    // --- Convolutional branch: tied 30-weight accelerated run vs Adam ------
    let images14 = downsample_half(&images);
    let n_cnn = images14.nrows().min(5_000);
    let cnn_problem = Problem::CnnClassify(CnnClassify {
        data: images14.slice(ndarray::s![..n_cnn, ..]).to_owned(),
        labels: labels_u8[..n_cnn].iter().map(|&l| l as usize).collect(),
    });
    let n_meta = n_cnn.min(1_500);
    let cnn_small = Problem::CnnClassify(CnnClassify {
        data: images14.slice(ndarray::s![..n_meta, ..]).to_owned(),
        labels: labels_u8[..n_meta].iter().map(|&l| l as usize).collect(),
    });
    let schema = build_tying_schema(&Architecture::ConvClassifier).unwrap();
    let dim = schema.total_dim;
    let family = ProblemFamily::Fixed(cnn_small);
    let tied_steps = vec![0.05; 8];
    let tied_schedule =
        StepSchedule::new(tied_steps.clone(), ExtensionRule::ConstantMean).unwrap();
    let mut tied_cfg =
        MetaTrainConfig::new(family.clone(), MapInit::diagonal_ones(dim), tied_steps);
    tied_cfg.algorithm = InLoopAlgorithm::Lamd;

    let mut w = vec![0.0f64; dim];
    let mut draw = 0u64;
    for m in 0..15 {
        let map = MirrorMap::diagonal(w.iter().map(|v| v.exp()).collect()).unwrap();
        let samples: Vec<_> = (0..2)
            .map(|_| {
                draw += 1;
                family.sample(500 + draw)
            })
            .collect::<mirror_opt::error::Result<Vec<_>>>()
            .unwrap();
        let g = meta_gradient(&tied_cfg, &map, &tied_schedule, &samples).unwrap();
        let step = 0.2 / (1.0 + m as f64 / 10.0);
        for (wi, gi) in w.iter_mut().zip(&g.map_grad) {
            *wi -= step * gi;
        }
        // Project onto the tied subspace: 30 free parameters.
        let tied = contract_tied(&schema, &PrimalVector::from_vec(w.clone()), ContractMode::Mean)
            .unwrap();
        w = expand_tied(&schema, &tied).unwrap().0.to_vec();
    }
    let tied_map = MirrorMap::diagonal(w.iter().map(|v| v.exp()).collect()).unwrap();

    let cnn_epoch = n_cnn / 500;
    let cnn_horizon = 2 * cnn_epoch;
    let mut cnn_opts = RunOptions::iters(cnn_horizon);
    cnn_opts.objective_stride = cnn_epoch;

    // Light Adam tuning on one held initialization.
    let tune_x0 = cnn_problem.initial_point(99);
    let tune_oracle = StochasticOracle::minibatch(500, 7);
    let mut adam_step = 1e-3;
    let mut adam_best = f64::INFINITY;
    for s in [1e-3, 3e-3, 1e-2] {
        let out = run_baseline(
            &cnn_problem,
            &BaselineConfig {
                kind: BaselineKind::Adam,
                step: s,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &tune_x0,
            Some(&tune_oracle),
            &cnn_opts,
        )
        .unwrap();
        let f = trace_f_at(&out.trace, cnn_horizon);
        if f < adam_best {
            adam_best = f;
            adam_step = s;
        }
    }

    let mut lamd_final = 0.0f64;
    let mut adam_final = 0.0f64;
    let cnn_seeds = 5u64;
    for seed in 0..cnn_seeds {
        let x0 = cnn_problem.initial_point(100 + seed);
        let oracle = StochasticOracle::minibatch(500, 77 + seed);
        let lamd = run_lamd(
            &tied_map,
            &cnn_problem,
            &tied_schedule,
            3.0,
            1.0,
            &x0,
            Some(&oracle),
            &cnn_opts,
        )
        .unwrap();
        assert!(lamd.diverged.is_none());
        let adam = run_baseline(
            &cnn_problem,
            &BaselineConfig {
                kind: BaselineKind::Adam,
                step: adam_step,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &x0,
            Some(&oracle),
            &cnn_opts,
        )
        .unwrap();
        lamd_final += trace_f_at(&lamd.trace, cnn_horizon) / cnn_seeds as f64;
        adam_final += trace_f_at(&adam.trace, cnn_horizon) / cnn_seeds as f64;
    }
    let cnn_ok = lamd_final <= 1.05 * adam_final;

    let secs = t0.elapsed().as_secs_f64();
    report(
        11,
        name,
        mlp_ok && cnn_ok,
        &format!("learned spline vs SGD(0.1) mean cross-entropy at {} checkpoints past k = {warm}: {} vs {} (strictly lower: {mlp_ok}); tied 30-weight accelerated run {lamd_final:.4} vs Adam({adam_step}) {adam_final:.4} over 2 epochs (within 5%: {cnn_ok}), {secs:.0}s",
            checkpoints.len(),
            lmd_mean.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/"),
            sgd_mean.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")),
    );
    budget(11, name, secs, 3600.0);
}
