use std::path::{Path, PathBuf};
use std::process::Command;

use ddc_core::dgp::sample_dataset;
use ddc_core::estimate::{k_stage_estimate, EstimatorKind, FirstStep, SampleAnalogues};
use ddc_harness::cli::{run_from, RECORDS_FILE, SUMMARY_FILE, TABLES_FILE};
use ddc_harness::config::Config;
use ddc_harness::io::{read_dataset, read_records, write_dataset};
use ddc_harness::manifest::{self, RunManifest, RunStatus};

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run(args: &[&str]) -> (u8, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["ddc"];
    full.extend_from_slice(args);
    let code = run_from(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const SMALL: &str = r#"
[model]
kind = "bus"

[design]
name = "small"
misspec = { kind = "quadratic_utility", quad_coeff = -0.025 }

[experiment]
sample_sizes = [300, 600]
deltas = ["1/2"]
k_values = [1, 2]
estimators = ["ml", "md_identity"]
replications = 6
base_seed = 99
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ddc");
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[model]\nkind = \"bus\"\nbogus = 1\n");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["solve", s(&bad)]), Some(2));
    assert_eq!(code(&["verify", "--suite", "nope"]), Some(2));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["verify", "--suite", "model"]), Some(0));
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo("configs/correct.toml");
    let missing = dir.path().join("missing.csv");
    let bad_data = write(dir.path(), "bad.csv", "a,x,x_next\n3,1,1\n");
    let unknown_est = write(
        dir.path(),
        "est.toml",
        "[model]\nkind = \"bus\"\n[design]\nname = \"d\"\nmisspec = { kind = \"correct\" }\n[experiment]\nestimators = [\"gmm\"]\n",
    );
    assert_eq!(run(&["estimate", s(&cfg), "--data", s(&missing)]).0, 2);
    assert_eq!(run(&["estimate", s(&cfg), "--data", s(&bad_data)]).0, 2);
    assert_eq!(run(&["estimate", s(&cfg), "--data", s(&bad_data), "--estimator", "gmm"]).0, 2);
    assert_eq!(run(&["solve", s(&unknown_est)]).0, 2);
    assert_eq!(run(&["solve", s(&dir.path().join("none.toml"))]).0, 2);
    assert_eq!(run(&["experiment", s(&cfg)]).0, 2);
}

#[test]
fn verify_fault_injection_fails() {
    let (code, out, _) = run(&["verify", "--suite", "asymptotics", "--inject-fault", "phi"]);
    assert_eq!(code, 1);
    assert!(out.contains("FAIL Upsilon_ML equals Upsilon_MD(Phi)"), "{out}");
}

fn solve_table(out: &str) -> Vec<Vec<f64>> {
    out.lines()
        .skip(3)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn solve_prints_ccps_per_state() {
    let cfg = repo("configs/correct.toml");
    let (code, out, _) = run(&["solve", s(&cfg)]);
    assert_eq!(code, 0);
    let tight = solve_table(&out);
    assert_eq!(tight.len(), 20);
    for (x, row) in tight.iter().enumerate() {
        assert_eq!(row[0] as usize, x + 1);
        assert!((row[1] + row[2] - 1.0).abs() < 1e-12);
    }
    let (_, loose, _) = run(&["solve", s(&cfg), "--tol", "1e-6"]);
    for (a, b) in tight.iter().zip(solve_table(&loose)) {
        assert!((a[1] - b[1]).abs() < 1e-5);
    }
}

#[test]
fn simulate_then_estimate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = repo("configs/correct.toml");
    let data = dir.path().join("d.csv");
    let (code, _, err) = run(&["simulate", s(&cfg_path), "--n", "800", "--seed", "5", "--out", s(&data)]);
    assert_eq!(code, 0, "{err}");

    let (cfg, _) = Config::load(&cfg_path).unwrap();
    let model = cfg.model.build().unwrap();
    let design = cfg.design.build(&model, None).unwrap();
    let pi = ddc_core::dgp::true_joint(&model, &design, ddc_core::dgp::SampleSize::Finite(800)).unwrap();
    let expected = sample_dataset(&pi, 800, 5);
    let read = read_dataset(&data, 2, 20).unwrap();
    assert_eq!(read.obs, expected.obs);

    let an = SampleAnalogues::from_dataset(&read).unwrap();
    let first = FirstStep::BusStayShare;
    for k in [1usize, 3] {
        let trace = k_stage_estimate(&model, &read, &an, k, &EstimatorKind::Ml, &first, None).unwrap();
        let (code, out, _) = run(&["estimate", s(&cfg_path), "--data", s(&data), "--k", &k.to_string()]);
        assert_eq!(code, 0);
        let last = out.lines().last().unwrap();
        let fields: Vec<&str> = last.split(',').collect();
        assert_eq!(fields[0], k.to_string());
        let alpha = trace.alpha_stages.last().unwrap();
        assert_eq!(fields[1], alpha[0].to_string());
        assert_eq!(fields[2], alpha[1].to_string());
    }

    // Writing the library sample directly gives the same file.
    let again = dir.path().join("again.csv");
    write_dataset(&again, &expected).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&data).unwrap());
}

#[test]
fn md_estimate_with_optimal_weight_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let data = dir.path().join("d.csv");
    assert_eq!(run(&["simulate", s(&cfg), "--n", "500", "--out", s(&data)]).0, 0);
    for w in ["identity", "w-av", "w-amse"] {
        let (code, out, err) = run(&["estimate", s(&cfg), "--data", s(&data), "--estimator", "md", "--weight", w, "--k", "2"]);
        assert_eq!(code, 0, "{err}");
        assert!(out.starts_with("estimator,K-MD"), "{out}");
    }
}

fn experiment(cfg: &Path, out: &Path, extra: &[&str]) -> (u8, String) {
    let mut args = vec!["experiment", s(cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    let (code, _, err) = run(&args);
    (code, err)
}

#[test]
fn experiment_is_deterministic_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("nested/one");
    let b = dir.path().join("eight");
    assert_eq!(experiment(&cfg, &a, &["--workers", "1"]).0, 0);
    assert_eq!(experiment(&cfg, &b, &["--workers", "8"]).0, 0);
    for f in [SUMMARY_FILE, RECORDS_FILE, TABLES_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (records, _) = read_records(&a.join(RECORDS_FILE)).unwrap();
    assert_eq!(records.len(), 12);
    let summary = std::fs::read_to_string(a.join(SUMMARY_FILE)).unwrap();
    assert!(summary.starts_with(
        "design,delta,estimator,W,K,n,coord,scaled_bias,scaled_sd,scaled_mse,mcse_bias,S_valid,S_flagged\n"
    ));
    let tables = std::fs::read_to_string(a.join(TABLES_FILE)).unwrap();
    assert!(tables.contains("K-ML") && tables.contains("K-MD(I)"));

    let m = RunManifest::load(&a.join(manifest::FILE_NAME)).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    for o in &m.outputs {
        assert_eq!(o.sha256.as_deref(), Some(manifest::file_sha256(&a.join(&o.path)).unwrap().as_str()));
    }
}

#[test]
fn rerun_is_idempotent_and_partial_runs_need_a_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("run");
    assert_eq!(experiment(&cfg, &out, &[]).0, 0);
    let first = std::fs::read(out.join(SUMMARY_FILE)).unwrap();
    let records = std::fs::read_to_string(out.join(RECORDS_FILE)).unwrap();
    assert_eq!(experiment(&cfg, &out, &[]).0, 0);
    assert_eq!(std::fs::read(out.join(SUMMARY_FILE)).unwrap(), first);

    // Simulate an interruption: manifest still running, records cut mid-line.
    let manifest_path = out.join(manifest::FILE_NAME);
    let mut m = RunManifest::load(&manifest_path).unwrap();
    m.status = RunStatus::Running;
    m.save(&manifest_path).unwrap();
    let lines: Vec<&str> = records.lines().collect();
    let mut cut = lines[..5].join("\n");
    cut.push('\n');
    cut.push_str(&lines[5][..20]);
    std::fs::write(out.join(RECORDS_FILE), cut).unwrap();

    let (code, err) = experiment(&cfg, &out, &[]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("--resume"));
    assert_eq!(experiment(&cfg, &out, &["--resume"]).0, 0);
    assert_eq!(std::fs::read_to_string(out.join(RECORDS_FILE)).unwrap(), records);
    assert_eq!(std::fs::read(out.join(SUMMARY_FILE)).unwrap(), first);

    m.status = RunStatus::Running;
    m.save(&manifest_path).unwrap();
    assert_eq!(experiment(&cfg, &out, &["--force"]).0, 0);
    assert_eq!(std::fs::read(out.join(SUMMARY_FILE)).unwrap(), first);

    // A different replication count cannot resume the old run.
    m.save(&manifest_path).unwrap();
    assert_eq!(experiment(&cfg, &out, &["--resume", "--replications", "4"]).0, 2);
}
