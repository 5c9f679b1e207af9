//! Binary-level behavior tests: exit codes, report shapes, and the shipped
//! demo configs running the full offline pipeline end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dialogsim"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary spawns");
    assert!(
        out.status.success(),
        "dialogsim {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn demo_configs_run_the_full_offline_pipeline() {
    let dir = TempDir::new().unwrap();
    let path = |name: &str| dir.path().join(name);
    let arg = |p: PathBuf| p.to_str().unwrap().to_string();
    let script = arg(configs().join("script_demo.json"));
    let run = arg(path("demo-run"));

    // The shipped demo config converges on its first iteration.
    run_ok(&[
        "--scripted", &script,
        "--out", &arg(path("opt.json")),
        "optimize",
        "--config", &arg(configs().join("optimize_demo.json")),
        "--run", &run,
    ]);
    let opt = read_json(&path("opt.json"));
    assert_eq!(opt["early_exit"], serde_json::json!(true));
    assert_eq!(opt["iterations_run"], serde_json::json!(1));
    let collection = opt["final_collection"].as_str().unwrap().to_string();

    // Attitude analytics reuse the chains the optimizer already persisted.
    run_ok(&[
        "--scripted", &script,
        "--out", &arg(path("coa.json")),
        "analyze-coa",
        "--run", &run,
        "--collection", &collection,
        "--matrix-out", &arg(path("matrix.csv")),
    ]);
    let coa = read_json(&path("coa.json"));
    assert_eq!(coa["chain_count"], serde_json::json!(4));
    assert_eq!(coa["acceptance_rate"], serde_json::json!(1.0));
    // Every demo dialogue follows the same attitude arc, so the matrix is
    // deterministic and its mean row entropy is exactly zero.
    assert_eq!(coa["h_avg"], serde_json::json!(0.0));
    let csv = fs::read_to_string(path("matrix.csv")).unwrap();
    assert!(csv.starts_with("from\\to,Refusal,"));
    assert_eq!(csv.lines().count(), 17, "header plus one row per state");

    // Strategy annotation via three-vote consensus against the builtin
    // ten-strategy catalog.
    run_ok(&[
        "--scripted", &script,
        "--out", &arg(path("strat.json")),
        "analyze-strategies",
        "--run", &run,
        "--collection", &collection,
    ]);
    let strat = read_json(&path("strat.json"));
    assert_eq!(strat["c_str"], serde_json::json!(2.0));
    assert_eq!(strat["annotation_count"], serde_json::json!(4));
    assert!(strat["note"].as_str().unwrap().contains("cv = sigma"));

    // Judge scoring and filtering.
    run_ok(&[
        "--scripted", &script,
        "--out", &arg(path("eval.json")),
        "evaluate",
        "--run", &run,
        "--collection", &collection,
    ]);
    let eval = read_json(&path("eval.json"));
    assert_eq!(eval["evaluated"], serde_json::json!(4));
    assert_eq!(eval["mean_of_means"], serde_json::json!(2.6));
    assert_eq!(eval["kept"].as_array().unwrap().len(), 4);

    // Export carries the persisted judge scores in each line's metadata.
    run_ok(&[
        "--out", &arg(path("exp.json")),
        "export",
        "--run", &run,
        "--collection", &collection,
    ]);
    let exp = read_json(&path("exp.json"));
    assert_eq!(exp["lines"], serde_json::json!(4));
    let first_line: serde_json::Value = serde_json::from_str(
        fs::read_to_string(exp["path"].as_str().unwrap())
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first_line["messages"][0]["role"], serde_json::json!("system"));
    assert_eq!(first_line["meta"]["scores"]["mean"], serde_json::json!(2.6));

    // Re-analyzing persisted 16-state chains against a smaller space is
    // refused with a pointer at the fix, instead of a panic.
    let out = bin()
        .args([
            "--scripted", &script,
            "analyze-coa",
            "--run", &run,
            "--collection", &collection,
            "--states", &arg(configs().join("state_space_example.json")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("re-classify with matching --states"),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sample_personas_is_deterministic_and_supports_custom_specs() {
    let first = run_ok(&["--seed", "9", "sample-personas", "--spec", "base", "-n", "3"]);
    let second = run_ok(&["--seed", "9", "sample-personas", "--spec", "base", "-n", "3"]);
    assert_eq!(first.stdout, second.stdout, "same seed, same personas");
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let personas = report.as_array().unwrap();
    assert_eq!(personas.len(), 3);
    assert!(personas.iter().all(|p| p["group"] == serde_json::json!("base")));

    let custom = configs().join("personas_custom.json");
    let out = run_ok(&[
        "--seed", "9",
        "sample-personas",
        "--spec", custom.to_str().unwrap(),
        "-n", "2",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let personas = report.as_array().unwrap();
    assert_eq!(personas.len(), 2);
    assert!(personas
        .iter()
        .all(|p| p["attributes"]["subscription_tier"].is_string()));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let unknown = bin().arg("no-such-command").output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));

    let conflicting = bin()
        .args([
            "--backend", "backend.json",
            "--scripted", "script.json",
            "sample-personas",
        ])
        .output()
        .unwrap();
    assert_eq!(conflicting.status.code(), Some(2), "--backend conflicts with --scripted");
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let dir = TempDir::new().unwrap();

    let missing_config = bin()
        .args(["optimize", "--config", "does-not-exist.json"])
        .arg("--run")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(missing_config.status.code(), Some(1));

    let missing_run = bin()
        .args(["analyze-coa", "--collection", "c-0"])
        .arg("--run")
        .arg(dir.path().join("absent"))
        .output()
        .unwrap();
    assert_eq!(missing_run.status.code(), Some(1));

    // Simulation needs a model seam; the error says which flags provide one.
    let no_backend = bin()
        .args(["simulate", "--prompt", "Sell."])
        .arg("--run")
        .arg(dir.path().join("run2"))
        .output()
        .unwrap();
    assert_eq!(no_backend.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&no_backend.stderr).contains("--backend or --scripted"),
        "stderr: {}",
        String::from_utf8_lossy(&no_backend.stderr)
    );
}
