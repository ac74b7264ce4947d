use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn gradpoly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradpoly"))
        .args(args)
        .env_remove("GRADPOLY_OUT_DIR")
        .output()
        .expect("spawn gradpoly")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn failure_report(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().rev().find(|l| l.contains("\"status\":\"failed\"")).expect("failure report");
    serde_json::from_str(line).unwrap()
}

fn run_unloaded(out_dir: &Path) -> PathBuf {
    let cfg = scenario("unloaded.toml");
    let out = gradpoly(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out_dir.join("trace.jsonl")
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&gradpoly(&["--help"])), 0);
    assert_eq!(code(&gradpoly(&["--version"])), 0);
    assert_eq!(code(&gradpoly(&["run", "--help"])), 0);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = gradpoly(&["frobnicate"]);
    assert_eq!(code(&out), 2);
    assert_eq!(failure_report(&out)["kind"], "usage");
}

#[test]
fn shipped_scenarios_validate() {
    for name in ["shear_ramp.toml", "unloaded.toml", "underresolved.toml"] {
        let out = gradpoly(&["validate-config", "--config", scenario(name).to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn invalid_scenario_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("unloaded.toml"))
        .unwrap()
        .replace("s = 8.5", "s = 5.0")
        .replace("steps = 8", "steps = 0");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = gradpoly(&["validate-config", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let reasons = failure_report(&out)["reasons"].as_array().unwrap().clone();
    assert!(reasons.iter().any(|r| r.as_str().unwrap().contains("2p/(p-6) = 8")), "{reasons:?}");
    assert!(reasons.iter().any(|r| r.as_str().unwrap().contains("steps")), "{reasons:?}");

    // the same file is a usage error for `run`
    let out = gradpoly(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = gradpoly(&["run", "--config", "/nonexistent/scenario.toml"]);
    assert_eq!(code(&out), 2);
    assert_eq!(failure_report(&out)["command"], "run");
}

#[test]
fn unloaded_run_writes_artifacts_and_certifies() {
    let dir = tempfile::tempdir().unwrap();
    let trace = run_unloaded(&dir.path().join("o"));
    let root = trace.parent().unwrap();
    assert!(root.join("scenario.toml").is_file());
    assert!(root.join("summary.csv").is_file());
    // dump_stride = 0 keeps only the final state
    let mut dumps: Vec<String> = fs::read_dir(root.join("dumps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    dumps.sort();
    assert_eq!(dumps, ["step_0008_deformation.gpf", "step_0008_fractions.gpf"]);

    let rows = csv::Reader::from_path(root.join("summary.csv")).unwrap().records().count();
    assert_eq!(rows, 9);

    let out = gradpoly(&["certify", trace.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn corrupted_trace_fails_certification() {
    let dir = tempfile::tempdir().unwrap();
    let trace = run_unloaded(&dir.path().join("o"));
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let idx = lines.iter().position(|l| l.contains("\"record\":\"step\"") && l.contains("\"k\":3")).unwrap();
    let mut rec: Value = serde_json::from_str(&lines[idx]).unwrap();
    let total = rec["energy"]["total"].as_f64().unwrap();
    rec["energy"]["total"] = Value::from(total - 1e-3);
    lines[idx] = rec.to_string();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();

    let out = gradpoly(&["certify", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert_eq!(failure_report(&out)["kind"], "certificate");

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&gradpoly(&["certify", empty.to_str().unwrap()])), 2);

    let headless = dir.path().join("headless.jsonl");
    fs::write(&headless, lines[1..].join("\n")).unwrap();
    assert_eq!(code(&gradpoly(&["certify", headless.to_str().unwrap()])), 2);
}

#[test]
fn underresolved_run_fails_the_two_sided_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("underresolved.toml");
    let out = gradpoly(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let report = failure_report(&out);
    assert_eq!(report["kind"], "certificate");
    let reasons = report["reasons"].as_array().unwrap();
    assert!(reasons.iter().any(|r| r.as_str().unwrap().contains("two-sided")), "{reasons:?}");
    // the trace is still complete and the audit agrees with the run
    let out = gradpoly(&["certify", dir.path().join("trace.jsonl").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let cfg = scenario("unloaded.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_gradpoly"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("GRADPOLY_OUT_DIR", &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(target.join("trace.jsonl").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn oracle_exit_codes() {
    let out = gradpoly(&["oracle", "--epsilon", "0.3", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(report["convergence"]["cells"], serde_json::json!([8, 16, 32]));

    let out = gradpoly(&["oracle", "--coarse"]);
    assert_eq!(code(&out), 1);
    assert_eq!(failure_report(&out)["kind"], "oracle");

    assert_eq!(code(&gradpoly(&["oracle", "--epsilon", "1.5"])), 2);
    assert_eq!(code(&gradpoly(&["oracle", "--cells", "1,2"])), 2);
}
