use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bsee-control"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn solve_writes_report_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", config("lq_tree_unit.toml").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(dir.path());
    assert_eq!(r["passed"], true);
    assert_eq!(r["status"], "pass");
    assert!(r["checks"].as_array().unwrap().iter().any(|c| c["name"] == "uniqueness"));
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x,node,y,z,k,u"));
    // 2^9 - 1 tree nodes, one state component each.
    assert_eq!(lines.count(), 511);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("status: Pass"));
}

#[test]
fn check_runs_only_the_named_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["check", config("lq_tree_unit.toml").to_str().unwrap(), "--suite", "duality"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let r = report(dir.path());
    let suites: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["suite"].as_str().unwrap()).collect();
    assert!(suites.iter().all(|s| *s == "duality" || *s == "solve"), "{suites:?}");
    assert!(suites.contains(&"duality"));
}

#[test]
fn broken_configs_exit_with_check_failure() {
    for (file, check) in [
        ("broken/negative_control_weight.toml", "lq-positivity"),
        ("broken/weak_parabolicity.toml", "super-parabolicity"),
        ("broken/non_monotone.toml", "monotonicity"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&["solve", config(file).to_str().unwrap()], dir.path());
        assert_eq!(code(&o), 4, "{file}");
        let r = report(dir.path());
        let hit = r["checks"].as_array().unwrap().iter().find(|c| c["name"] == check).unwrap();
        assert_eq!(hit["status"], "fail");
        assert!(hit["witness"].is_string(), "{file}: {hit}");
        assert!(!dir.path().join("trajectories.csv").exists());
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let lq = config("lq_closed_form.toml");
    let o = run(&["solve", lq.to_str().unwrap(), "--mode", "tree"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("steps"));

    let o = run(&["check", lq.to_str().unwrap(), "--suite", "nonsense"], dir.path());
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nproblem = \"lq-abstract\"\nmode = \"tree\"\nsteps = 2\nstep = 3\n").unwrap();
    let o = run(&["solve", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));

    let o = run(&["solve", dir.path().join("missing.toml").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
}

#[test]
fn non_convergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("lq_tree_unit.toml"))
        .unwrap()
        .replace("picard_tol = 1e-11", "picard_tol = 1e-11\nmax_picard = 2\nstep_delta = 1.0\nmeasure_k = false");
    let path = dir.path().join("capped.toml");
    std::fs::write(&path, text).unwrap();
    let o = run(&["solve", path.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(dir.path());
    assert_eq!(r["status"], "non-convergence");
    assert!(r["error"].as_str().unwrap().contains("converge"));
}

#[test]
fn time_sweep_has_first_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["sweep", config("lq_closed_form.toml").to_str().unwrap(), "--levels", "32,64,128,256"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][2], "");
    for row in &rows[1..] {
        let order: f64 = row[2].parse().unwrap();
        assert!((order - 1.0).abs() < 0.1, "{csv}");
    }
}

#[test]
fn seed_override_changes_only_sampled_checks() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("lq_tree_random.toml");
    assert_eq!(code(&run(&["solve", cfg.to_str().unwrap()], a.path())), 0);
    assert_eq!(code(&run(&["solve", cfg.to_str().unwrap(), "--seed", "99"], b.path())), 0);
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(rb["seed"], 99);
    // The solution is seed independent up to the Picard tolerance.
    let (ja, jb) = (ra["summary"]["cost"]["total"].as_f64().unwrap(), rb["summary"]["cost"]["total"].as_f64().unwrap());
    assert!((ja - jb).abs() < 1e-9);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("parabolic_tree.toml");
    run(&["solve", cfg.to_str().unwrap()], a.path());
    run(&["solve", cfg.to_str().unwrap()], b.path());
    for f in ["report.json", "trajectories.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
