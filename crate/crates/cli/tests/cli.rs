use std::path::Path;
use std::process::{Command, Output};

use headwise_cli::load_plan;
use headwise_core::calibrate::{audit_plan, InfluenceTable};
use headwise_core::tensor::read_dump_file;
use headwise_core::{HeadStrategy, PlanFile};
use tempfile::TempDir;

const SMALL: &str = "--timesteps 3 --layers 2 --heads 4 --head-dim 16 --visual-tokens 96 --text-tokens 16 --block 16";

fn headwise(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headwise")).current_dir(dir).args(args).output().expect("spawn headwise")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn calibrate(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["calibrate"];
    args.extend(SMALL.split_whitespace());
    args.extend_from_slice(extra);
    ok(&headwise(dir, &args))
}

fn printed_sparsity(stdout: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix("sparsity: ")).unwrap().parse().unwrap()
}

#[test]
fn delta_zero_plan_is_all_full() {
    let dir = TempDir::new().unwrap();
    calibrate(dir.path(), &["--delta", "0", "--out", "zero.json"]);
    let file = PlanFile::load(dir.path().join("zero.json")).unwrap();
    assert_eq!(file.strategies_used().into_iter().collect::<Vec<_>>(), vec![HeadStrategy::Full]);
    assert!(dir.path().join("zero.csv").exists());
}

#[test]
fn run_reports_the_calibrated_sparsity() {
    let dir = TempDir::new().unwrap();
    let stdout = calibrate(dir.path(), &["--out", "plan.json"]);
    ok(&headwise(dir.path(), &["run", "--plan", "plan.json", "--report", "report.json"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["sparsity"].as_f64().unwrap(), printed_sparsity(&stdout));
    assert!(report["sparsity"].as_f64().unwrap() > 0.0);
    assert!(report["max_layer_rse"].as_f64().unwrap() >= report["mean_layer_rse"].as_f64().unwrap());
}

#[test]
fn delta_zero_run_matches_baseline() {
    let dir = TempDir::new().unwrap();
    calibrate(dir.path(), &["--delta", "0", "--out", "zero.json"]);
    let stdout = ok(&headwise(dir.path(), &["run", "--plan", "zero.json"]));
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["sparsity"].as_f64(), Some(0.0));
    assert_eq!(report["flops_reduction"].as_f64(), Some(0.0));
    assert_eq!(report["max_layer_rse"].as_f64(), Some(0.0));
}

#[test]
fn plans_for_both_coefficients_pass_the_audit() {
    let dir = TempDir::new().unwrap();
    calibrate(dir.path(), &["--delta", "0.6", "--coeff", "1", "--out", "c1.json"]);
    calibrate(dir.path(), &["--delta", "0.6", "--coeff", "1.5", "--out", "c15.json"]);
    let mut layers = Vec::new();
    for (name, coeff) in [("c1", 1.0), ("c15", 1.5)] {
        let plan = load_plan(&dir.path().join(format!("{name}.json"))).unwrap();
        let csv = std::fs::File::open(dir.path().join(format!("{name}.csv"))).unwrap();
        let table = InfluenceTable::read_csv(csv).unwrap();
        assert_eq!(audit_plan(&plan, &table, 0.6, coeff), vec![]);
        layers.push(plan.layers().to_vec());
    }
    assert_ne!(layers[0], layers[1]);
}

#[test]
fn influence_digest_matches_csv() {
    let dir = TempDir::new().unwrap();
    calibrate(dir.path(), &["--out", "plan.json"]);
    let file = PlanFile::load(dir.path().join("plan.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    assert_eq!(file.influence_digest, headwise_core::calibrate::influence_digest(&csv));
    assert_eq!(PlanFile::from_json(&file.to_json().unwrap()).unwrap(), file);
}

#[test]
fn cached_at_first_timestep_is_rejected_before_running() {
    let dir = TempDir::new().unwrap();
    calibrate(dir.path(), &["--out", "plan.json"]);
    let mut file = PlanFile::load(dir.path().join("plan.json")).unwrap();
    file.plan.iter_mut().find(|e| e.t == 0).unwrap().heads[0] = HeadStrategy::Cached;
    file.save(dir.path().join("tampered.json")).unwrap();
    let out = headwise(dir.path(), &["run", "--plan", "tampered.json", "--report", "report.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn mismatched_workload_flags_are_rejected() {
    let dir = TempDir::new().unwrap();
    calibrate(dir.path(), &["--out", "plan.json"]);
    let out = headwise(dir.path(), &["run", "--plan", "plan.json", "--heads", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
}

#[test]
fn invalid_flags_exit_with_validation_code() {
    let dir = TempDir::new().unwrap();
    for args in [
        vec!["calibrate", "--heads", "0"],
        vec!["calibrate", "--delta", "-1"],
        vec!["calibrate", "--coeff", "0.5"],
        vec!["calibrate", "--windows", "2,2"],
        vec!["run", "--plan", "missing.json"],
    ] {
        let code = headwise(dir.path(), &args).status.code();
        assert!(matches!(code, Some(1) | Some(2)), "{args:?} gave {code:?}");
    }
    std::fs::write(dir.path().join("bad.json"), "{\"version\": 1}").unwrap();
    assert_eq!(headwise(dir.path(), &["run", "--plan", "bad.json"]).status.code(), Some(2));
    assert_eq!(headwise(dir.path(), &["calibrate", "--heads", "0"]).status.code(), Some(2));
}

#[test]
fn generate_is_deterministic_and_importable() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let mut args = vec!["generate", "--seed", "7", "--out", out];
        args.extend(SMALL.split_whitespace());
        ok(&headwise(dir.path(), &args));
    }
    for f in ["q.dfa2", "k.dfa2", "v.dfa2", "workload.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }

    // Imported and regenerated workloads give the same outputs.
    calibrate(dir.path(), &["--seed", "7", "--out", "plan.json"]);
    ok(&headwise(dir.path(), &["run", "--plan", "plan.json", "--seed", "7", "--dump-outputs", "gen.dfa2"]));
    ok(&headwise(dir.path(), &["run", "--plan", "plan.json", "--workload", "a", "--dump-outputs", "imp.dfa2"]));
    let gen = read_dump_file(dir.path().join("gen.dfa2")).unwrap();
    assert_eq!(gen.shape(), &[3, 2, 4, 112, 16]);
    assert_eq!(gen, read_dump_file(dir.path().join("imp.dfa2")).unwrap());
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&headwise(dir.path(), &["verify", "--sizes", "17,64,130", "--seeds", "1"]));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);
    assert!(stdout.contains("36 cases"));

    let out = headwise(dir.path(), &["verify", "--seeds", "1", "--fault", "mask-off-by-one"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL  masked-dense oracle"));
}

#[test]
fn bench_writes_csv_and_rejects_unreachable_targets() {
    let dir = TempDir::new().unwrap();
    let small = ["bench", "--visual-tokens", "256", "--text-tokens", "32", "--head-dim", "16", "--block", "32"];
    let mut args = small.to_vec();
    args.extend_from_slice(&["--sparsity", "0,0.5", "--out", "bench.csv"]);
    ok(&headwise(dir.path(), &args));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("n_visual,n_text,head_dim,block,target_sparsity,achieved_sparsity,dense_ms,sparse_ms,speedup,ideal")
    );
    assert_eq!(lines.count(), 2);

    let mut args = small.to_vec();
    args.extend_from_slice(&["--sparsity", "0.95"]);
    assert_eq!(headwise(dir.path(), &args).status.code(), Some(2));
    let mut args = small.to_vec();
    args.extend_from_slice(&["--iters", "3"]);
    assert_eq!(headwise(dir.path(), &args).status.code(), Some(2));
}

#[test]
fn thread_cap_is_honored_and_validated() {
    let dir = TempDir::new().unwrap();
    let run = |v: &str| {
        let mut args = vec!["calibrate", "--out", "plan.json"];
        args.extend(SMALL.split_whitespace());
        Command::new(env!("CARGO_BIN_EXE_headwise"))
            .current_dir(dir.path())
            .env("DFA2_THREADS", v)
            .args(&args)
            .output()
            .unwrap()
    };
    let one = ok(&run("1"));
    let plan_one = std::fs::read(dir.path().join("plan.json")).unwrap();
    ok(&run("4"));
    assert_eq!(std::fs::read(dir.path().join("plan.json")).unwrap(), plan_one);
    assert!(one.contains("sparsity: "));
    assert_eq!(run("zero").status.code(), Some(2));
}
