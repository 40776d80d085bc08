//! End-to-end tests of the `mirror-opt` binary: exit codes, file artifacts,
//! byte-identical reruns, and report formats.

use mirror_opt::cli::{EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK};
use mirror_opt::diagnostics::{
    default_step_grid, grid_search_baseline, Trace, TRACE_CSV_HEADER,
};
use mirror_opt::equivariance::TyingSchema;
use mirror_opt::io::format_f64_17;
use mirror_opt::optimizers::BaselineKind;
use mirror_opt::problems::Quadratic;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mirror-opt")
}

/// Fresh scratch directory per test.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mirror-opt-cli-{}-{name}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const QUADRATIC_PROBLEM: &str =
    r#"{"kind": "quadratic", "d": [1.0, 4.0, 9.0], "b": [1.0, -2.0, 0.5]}"#;

#[test]
fn optimize_writes_one_trace_per_seed_and_algorithm() {
    let dir = scratch("optimize-grid");
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "schedule": {{"learned": [0.1, 0.1, 0.1], "rule": "constant_mean"}},
            "algorithms": [{{"name": "gd", "step": 0.05}}, {{"name": "lamd"}}],
            "iterations": 40,
            "seeds": [1, 2],
            "out_dir": "out"
        }}"#
    );
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["optimize", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    for (alg, seed, idx) in [
        ("gd", 1, 0),
        ("gd", 2, 1),
        ("lamd", 1, 0),
        ("lamd", 2, 1),
    ] {
        let path = dir.join(format!("out/trace-{alg}-s{seed}-{idx}.csv"));
        let text = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {path:?}"));
        assert!(text.starts_with(TRACE_CSV_HEADER));
        let trace = Trace::parse_csv(&text).unwrap();
        assert_eq!(trace.len(), 41, "rows 0..=40");
        assert_eq!(trace.rows()[0].k, 0);
        // Reruns are deterministic, so timing stays disabled.
        assert!(trace.rows().iter().all(|r| r.wall_ns == 0));
    }
}

#[test]
fn optimize_reruns_and_duplicate_seeds_are_byte_identical() {
    let dir = scratch("optimize-identical");
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "map": {{"kind": "diagonal", "d": [1.0, 4.0, 9.0]}},
            "schedule": {{"learned": [0.5, 0.5], "rule": "constant_mean"}},
            "algorithms": [{{"name": "md"}}],
            "iterations": 30,
            "seeds": [7, 7],
            "out_dir": "a"
        }}"#
    );
    fs::write(dir.join("cfg.json"), config).unwrap();
    assert_eq!(code(&run_in(&dir, &["optimize", "--config", "cfg.json"])), EXIT_OK);
    // The same seed listed twice produces identical trace bytes.
    let first = fs::read(dir.join("a/trace-md-s7-0.csv")).unwrap();
    let second = fs::read(dir.join("a/trace-md-s7-1.csv")).unwrap();
    assert_eq!(first, second);
    // A rerun into another directory reproduces the bytes exactly.
    let out2 = run_in(&dir, &["optimize", "--config", "cfg.json", "--out", "b"]);
    assert_eq!(code(&out2), EXIT_OK);
    assert_eq!(first, fs::read(dir.join("b/trace-md-s7-0.csv")).unwrap());
    // The ergodic-average companion trace is written alongside.
    assert!(dir.join("a/trace-md-s7-0-ergodic.csv").is_file());
}

#[test]
fn seed_flag_overrides_the_config_seed_list() {
    let dir = scratch("seed-flag");
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "algorithms": [{{"name": "gd", "step": 0.05}}],
            "iterations": 5,
            "seeds": [1, 2, 3],
            "out_dir": "out"
        }}"#
    );
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["optimize", "--config", "cfg.json", "--seed", "9"]);
    assert_eq!(code(&out), EXIT_OK);
    let files: Vec<String> = fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files, vec!["trace-gd-s9-0.csv".to_string()]);
}

#[test]
fn train_map_zero_iterations_writes_the_initialization() {
    let dir = scratch("train-zero");
    let config = r#"{
        "schema": "mirror-opt/v1",
        "out_dir": "out",
        "train": {
            "family": {"kind": "quadratic_diag", "d": [1.0, 10.0]},
            "map_init": {"kind": "diagonal", "d": [2.0, 3.0]},
            "steps_init": [0.05, 0.04],
            "meta_iters": 0
        }
    }"#;
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["train-map", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let map: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/map.json")).unwrap()).unwrap();
    assert_eq!(map["kind"], "diagonal_quadratic");
    assert_eq!(map["params"][0], 2.0);
    assert_eq!(map["params"][1], 3.0);
    let schedule: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/schedule.json")).unwrap()).unwrap();
    assert_eq!(schedule["learned"][0], 0.05);
    assert_eq!(schedule["learned"][1], 0.04);
    let log = fs::read_to_string(dir.join("out/training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only");
}

#[test]
fn train_map_on_a_quadratic_family_reports_the_recovered_weighting() {
    let dir = scratch("train-recover");
    let config = r#"{
        "schema": "mirror-opt/v1",
        "out_dir": "out",
        "train": {
            "family": {"kind": "quadratic_diag", "d": [1.0, 10.0, 100.0]},
            "map_init": {"kind": "diagonal_ones"},
            "steps_init": [0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01],
            "init_batch": 8,
            "meta_step": 0.5,
            "meta_iters": 60,
            "seed": 0
        }
    }"#;
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["train-map", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("recovered-d: normalized="), "{text}");
    assert!(text.contains("target=[1.000000, 10.000000, 100.000000]"), "{text}");
    // The trained schedule is a loadable document.
    let schedule_text = fs::read_to_string(dir.join("out/schedule.json")).unwrap();
    assert!(serde_json::from_str::<serde_json::Value>(&schedule_text).is_ok());
}

#[test]
fn config_errors_exit_2() {
    let dir = scratch("config-errors");
    // Missing config file.
    let out = run_in(&dir, &["train-map", "--config", "missing.json"]);
    assert_eq!(code(&out), EXIT_CONFIG);
    // Wrong schema version.
    fs::write(dir.join("v0.json"), r#"{"schema": "mirror-opt/v0"}"#).unwrap();
    assert_eq!(
        code(&run_in(&dir, &["optimize", "--config", "v0.json"])),
        EXIT_CONFIG
    );
    // Unknown field (typo).
    fs::write(
        dir.join("typo.json"),
        r#"{"schema": "mirror-opt/v1", "problems": {}}"#,
    )
    .unwrap();
    assert_eq!(
        code(&run_in(&dir, &["optimize", "--config", "typo.json"])),
        EXIT_CONFIG
    );
    // Structurally valid config missing the command's section.
    fs::write(dir.join("empty.json"), r#"{"schema": "mirror-opt/v1"}"#).unwrap();
    assert_eq!(
        code(&run_in(&dir, &["benchmark", "--config", "empty.json"])),
        EXIT_CONFIG
    );
    // No --config flag at all.
    assert_eq!(code(&run_in(&dir, &["optimize"])), EXIT_CONFIG);
    // Referenced map document does not exist.
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "map": {{"kind": "file", "path": "no-such-map.json"}},
            "schedule": {{"learned": [0.1], "rule": "constant_mean"}},
            "algorithms": [{{"name": "md"}}],
            "seeds": [1],
            "out_dir": "out"
        }}"#
    );
    fs::write(dir.join("refmap.json"), config).unwrap();
    assert_eq!(
        code(&run_in(&dir, &["optimize", "--config", "refmap.json"])),
        EXIT_CONFIG
    );
}

#[test]
fn numerical_divergence_exits_3() {
    let dir = scratch("divergence");
    let config = r#"{
        "schema": "mirror-opt/v1",
        "problem": {"kind": "quadratic", "d": [100.0], "b": [1.0]},
        "algorithms": [{"name": "gd", "step": 0.1}],
        "iterations": 200,
        "seeds": [1],
        "out_dir": "out"
    }"#;
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["optimize", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_DIVERGENCE);
    // The partial trace is still on disk for inspection.
    assert!(dir.join("out/trace-gd-s1-0.csv").is_file());
}

#[test]
fn unwritable_output_directory_exits_4() {
    let dir = scratch("io-error");
    fs::write(dir.join("blocker"), "not a directory").unwrap();
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "algorithms": [{{"name": "gd", "step": 0.05}}],
            "iterations": 5,
            "seeds": [1],
            "out_dir": "blocker/out"
        }}"#
    );
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["optimize", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_IO);
}

#[test]
fn rate_check_reports_pass_and_fail_without_error_exits() {
    let dir = scratch("rate-check");
    let optimize = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "schedule": {{"learned": [0.1, 0.1], "rule": "constant_mean"}},
            "algorithms": [{{"name": "lamd"}}],
            "iterations": 300,
            "seeds": [1],
            "out_dir": "out"
        }}"#
    );
    fs::write(dir.join("opt.json"), optimize).unwrap();
    assert_eq!(code(&run_in(&dir, &["optimize", "--config", "opt.json"])), EXIT_OK);
    for (threshold, verdict) in [(-1.8, "PASS"), (-1e6, "FAIL")] {
        let config = format!(
            r#"{{
                "schema": "mirror-opt/v1",
                "problem": {QUADRATIC_PROBLEM},
                "rate_check": {{
                    "trace": "out/trace-lamd-s1-0.csv",
                    "f_star": {{"reference": {{"budget": 2000}}}},
                    "k_lo": 20, "k_hi": 300, "threshold": {threshold}
                }}
            }}"#
        );
        fs::write(dir.join("rate.json"), config).unwrap();
        let out = run_in(&dir, &["rate-check", "--config", "rate.json"]);
        assert_eq!(code(&out), EXIT_OK);
        let text = stdout(&out);
        assert!(text.contains(verdict), "threshold {threshold}: {text}");
        assert!(text.contains("rate-check: slope"), "{text}");
    }
    // A missing trace is a config error.
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "rate_check": {{
                "trace": "no-trace.csv",
                "f_star": {{"value": 0.0}},
                "k_lo": 10, "k_hi": 100, "threshold": -1.0
            }}
        }}"#
    );
    fs::write(dir.join("missing.json"), config).unwrap();
    assert_eq!(
        code(&run_in(&dir, &["rate-check", "--config", "missing.json"])),
        EXIT_CONFIG
    );
}

#[test]
fn equivariance_check_reports_the_untied_counterexample() {
    let dir = scratch("equivariance");
    let config = r#"{
        "schema": "mirror-opt/v1",
        "problem": {"kind": "mlp_moons", "n": 30, "noise": 0.1, "hidden": 12, "seed": 4},
        "seeds": [2],
        "out_dir": "out",
        "equivariance": {"samples": 8, "threshold": 1e-8, "step": 0.05}
    }"#;
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["equivariance-check", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_OK, "failed checks must not change the exit code");
    let text = stdout(&out);
    let line = |name: &str| {
        text.lines()
            .find(|l| l.contains(name))
            .unwrap_or_else(|| panic!("no {name} line in {text}"))
            .to_string()
    };
    assert!(line("gd-step").ends_with("PASS"));
    assert!(line("tied-diagonal-lmd").ends_with("PASS"));
    assert!(line("untied-diagonal-lmd").ends_with("FAIL"));
    let schema: TyingSchema =
        serde_json::from_str(&fs::read_to_string(dir.join("out/tying_schema.json")).unwrap())
            .unwrap();
    schema.validate().unwrap();
    assert_eq!(schema.orbit_count(), 5);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/equivariance_report.json")).unwrap())
            .unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);
}

#[test]
fn benchmark_tuned_gd_matches_the_library_grid_search() {
    let dir = scratch("benchmark");
    let config = format!(
        r#"{{
            "schema": "mirror-opt/v1",
            "problem": {QUADRATIC_PROBLEM},
            "map": {{"kind": "diagonal", "d": [1.0, 4.0, 9.0]}},
            "schedule": {{"learned": [0.02, 0.02], "rule": "constant_mean"}},
            "seeds": [3],
            "out_dir": "out",
            "benchmark": {{
                "baselines": ["gd"],
                "eval_iteration": 50,
                "checkpoints": [10, 50],
                "learned": ["md", "lamd"]
            }}
        }}"#
    );
    fs::write(dir.join("cfg.json"), config).unwrap();
    let out = run_in(&dir, &["benchmark", "--config", "cfg.json"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.join("out/benchmark.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "algorithm,step,f_at_10,f_at_50");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3, "gd + md + lamd");
    assert!(rows.iter().any(|r| r.starts_with("md,,")));
    assert!(rows.iter().any(|r| r.starts_with("lamd,,")));

    // Same seed, same code path: the table's gd row equals the library
    // grid-search outcome bit for bit.
    let problem = mirror_opt::problems::Problem::Quadratic(
        Quadratic::new(vec![1.0, 4.0, 9.0], vec![1.0, -2.0, 0.5]).unwrap(),
    );
    let x0 = problem.initial_point(3);
    let grid = default_step_grid(BaselineKind::Gd);
    let result =
        grid_search_baseline(&problem, BaselineKind::Gd, &grid, 50, &x0, None).unwrap();
    let gd_row = rows.iter().find(|r| r.starts_with("gd,")).unwrap();
    let cells: Vec<&str> = gd_row.split(',').collect();
    assert_eq!(cells[1], format_f64_17(result.best.step));
    assert_eq!(cells[3], format_f64_17(result.best_f));
    // The per-baseline grid table is written for inspection.
    assert!(dir.join("out/grid-gd.csv").is_file());
}

#[test]
fn help_and_version_exit_0() {
    let dir = scratch("help");
    assert_eq!(code(&run_in(&dir, &["--help"])), EXIT_OK);
    assert_eq!(code(&run_in(&dir, &["--version"])), EXIT_OK);
    // An unknown subcommand is a usage error.
    assert_eq!(code(&run_in(&dir, &["frobnicate"])), EXIT_CONFIG);
}
