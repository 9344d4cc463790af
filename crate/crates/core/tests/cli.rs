//! End-to-end checks of the configuration, run-directory and CSV surfaces.

use std::process::Command;

use eigenritz::config::ExperimentConfig;
use eigenritz::driver::{parse_series, run_approx_study, run_diagnose, run_reference, run_solve, Construction};

fn tiny_solve_config(dir: &str, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
[problem]
seed = {seed}

[problem.domain]
kind = "hypercube"
lo = 0.0
hi = 1.0
dim = 1

[problem.potential]
kind = "zero"

[method]
cutoff = "sine"
width = 10
depth = 2

[schedule]
epochs = 1500
lr0 = 0.005
points0 = 256
period = 20000
lr_factor = 0.25
points_factor = 2
log_every = 250

[run]
eigencount = 1
output_dir = "{dir}"
reference_modes = 16
"#
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn solve_writes_self_describing_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = tiny_solve_config(dir.to_str().unwrap(), 99);
    let out = run_solve(&cfg).unwrap();
    assert!(out.join("config.toml").exists());
    assert!(out.join("params_k1.txt").exists());
    assert!(out.join("trace_k1.csv").exists());
    assert!(out.join("meta.csv").exists());

    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next().unwrap(), "k,result,reference,rel_error");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    let rel: f64 = row[3].parse().unwrap();
    assert!(rel < 0.02, "relative error {rel}");

    // a run directory is self-describing: diagnose needs nothing else
    let (_csv, summary, ok) = run_diagnose(&out).unwrap();
    assert!(ok, "diagnostics failed:\n{summary}");
    assert!(out.parent().unwrap().exists());
}

#[test]
fn identical_config_and_seed_reproduce_results_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    let cfg_a = tiny_solve_config(dir_a.to_str().unwrap(), 123);
    let cfg_b = tiny_solve_config(dir_b.to_str().unwrap(), 123);
    run_solve(&cfg_a).unwrap();
    run_solve(&cfg_b).unwrap();
    let res_a = std::fs::read(dir_a.join("results.csv")).unwrap();
    let res_b = std::fs::read(dir_b.join("results.csv")).unwrap();
    assert_eq!(res_a, res_b);
    let par_a = std::fs::read(dir_a.join("params_k1.txt")).unwrap();
    let par_b = std::fs::read(dir_b.join("params_k1.txt")).unwrap();
    assert_eq!(par_a, par_b);
}

#[test]
fn reference_csv_lists_first_table_value() {
    let cfg = ExperimentConfig::parse(
        r#"
[problem]
seed = 1

[problem.domain]
kind = "hypercube"
lo = -1.0
hi = 1.0
dim = 5

[problem.potential]
kind = "separable_cosine"

[method]
cutoff = "phi_c"

[run]
eigencount = 30
output_dir = "unused"
reference_modes = 32
"#,
    )
    .unwrap();
    let csv = run_reference(&cfg, 30).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "k,lambda,multiplicity,multi_index");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    let lambda: f64 = row[1].parse().unwrap();
    assert!((lambda - 11.8345).abs() < 5e-4, "λ₁ = {lambda}");
    assert_eq!(row[3], "1x1x1x1x1");
}

#[test]
fn series_file_round_trip_and_study_csv() {
    let series = "# two-term target\n1 1 1.0\n3 1 0.5\n";
    let u = parse_series(series).unwrap();
    assert_eq!(u.dim(), 2);
    assert_eq!(u.support_len(), 2);
    let csv = run_approx_study(&u, Construction::Maurey, 2.0, &[8, 16], 2).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,seed,h1_error,bound");
    assert_eq!(lines.len(), 1 + 2 * 2);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        let err: f64 = cols[2].parse().unwrap();
        let bound: f64 = cols[3].parse().unwrap();
        assert!(err <= bound, "{line}");
    }
}

#[test]
fn compare_penalty_emits_all_arms() {
    // tiny budget: exercises the sweep mechanics, not the accuracy ordering
    let text = r#"
[problem]
seed = 5

[problem.domain]
kind = "hypercube"
lo = 0.0
hi = 1.0
dim = 1

[problem.potential]
kind = "zero"

[method]
cutoff = "sine"
width = 8
depth = 2

[schedule]
epochs = 400
lr0 = 0.005
points0 = 128
period = 20000
lr_factor = 0.25
points_factor = 2
log_every = 100

[run]
eigencount = 1
output_dir = "unused"
reference_modes = 16
"#;
    let cfg = ExperimentConfig::parse(text).unwrap();
    let (csv, arms) = eigenritz::driver::run_compare_penalty(&cfg, &[100.0, 500.0]).unwrap();
    assert_eq!(arms.len(), 3);
    assert_eq!(arms[0].label, "exact_bc");
    assert_eq!(arms[2].gamma, 500.0);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,gamma,lambda1,reference,rel_error");
    assert_eq!(lines.len(), 4);
    assert!(arms.iter().all(|a| a.rel_error.is_some()));
}

#[test]
fn binary_rejects_invalid_cutoff_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.toml");
    std::fs::write(
        &cfg_path,
        r#"
[problem]
seed = 1

[problem.domain]
kind = "hypercube"
lo = 0.0
hi = 1.0
dim = 1

[problem.potential]
kind = "zero"

[method]
cutoff = "phi_z"

[run]
eigencount = 1
output_dir = "unused"
"#,
    )
    .unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_eigenritz"))
        .args(["solve", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("method.cutoff"), "stderr: {stderr}");
    assert!(stderr.contains("phi_z"), "stderr: {stderr}");
}

#[test]
fn binary_reference_subcommand_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("ref.toml");
    std::fs::write(
        &cfg_path,
        r#"
[problem]
seed = 1

[problem.domain]
kind = "hypercube"
lo = 0.0
hi = 1.0
dim = 2

[problem.potential]
kind = "zero"

[method]
cutoff = "sine"

[run]
eigencount = 4
output_dir = "unused"
reference_modes = 16
"#,
    )
    .unwrap();
    let out_path = tmp.path().join("spectrum.csv");
    let output = Command::new(env!("CARGO_BIN_EXE_eigenritz"))
        .args([
            "reference",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let second = csv.lines().nth(2).unwrap();
    // the degenerate 5π² pair keeps lexicographic order and multiplicity 2
    assert!(second.starts_with("2,"), "{second}");
    assert!(second.ends_with(",2,1x2"), "{second}");
}
