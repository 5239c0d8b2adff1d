use std::path::Path;

use bsee_control::config::ExperimentConfig;
use bsee_control::continuation::{ContinuationConfig, ContinuationMode};
use bsee_control::control::{lq_problem, solve_optimal_control, LqSpec};
use bsee_control::lattice::{m2_distance, LatticeMode};
use bsee_control::parabolic::weak_solution_residual;
use bsee_control::runner::{run_experiment, solve, RunOptions};

fn repo_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn documented_example_parses() {
    let doc = std::fs::read_to_string(repo_file("docs/config.md")).unwrap();
    let block = doc.split("```toml").nth(1).unwrap().split("```").next().unwrap();
    let cfg = ExperimentConfig::from_toml(block).unwrap();
    assert_eq!(cfg.steps, 8);
}

#[test]
fn flat_continuation_matches_recursive_under_weak_coupling() {
    let mut spec = LqSpec::unit(LatticeMode::Tree, 6);
    spec.d = bsee_control::DMatrix::from_element(1, 1, 0.3);
    let problem = lq_problem(&spec).unwrap();
    let base = ContinuationConfig {
        picard_tol: 1e-11,
        ..Default::default()
    };
    let flat = ContinuationConfig {
        mode: ContinuationMode::Flat,
        ..base.clone()
    };
    let a = solve_optimal_control(&problem, &base).unwrap();
    let b = solve_optimal_control(&problem, &flat).unwrap();
    let d = m2_distance(&a.triple, &b.triple, problem.lattice(), problem.triple()).unwrap();
    assert!(d < 1e-9, "{d:e}");
    assert!((a.cost.total - b.cost.total).abs() < 1e-9);
}

#[test]
fn flat_continuation_reports_divergence_under_unit_coupling() {
    // Flat stages iterate against the decoupled solver at the full target
    // rho, so they stop contracting once rho K exceeds one.
    let problem = lq_problem(&LqSpec::unit(LatticeMode::Tree, 6)).unwrap();
    let flat = ContinuationConfig {
        mode: ContinuationMode::Flat,
        picard_tol: 1e-11,
        ..Default::default()
    };
    match solve_optimal_control(&problem, &flat) {
        Err(bsee_control::Error::NonConvergence { ratio, .. }) => assert!(ratio > 1.0),
        other => panic!("expected non-convergence, got {:?}", other.map(|s| s.cost)),
    }
}

#[test]
fn parabolic_solution_is_a_weak_solution() {
    let cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/parabolic_tree.toml")).unwrap();
    let problem = cfg.build_problem().unwrap();
    let sol = solve(&problem, &cfg).unwrap();
    let r = weak_solution_residual(&problem, &sol.triple.y, &sol.triple.z, &sol.control, 16, 4).unwrap();
    assert!(r < 1e-8, "{r:e}");
}

#[test]
fn mode_override_to_deterministic_is_validated() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/parabolic_tree.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.mode = LatticeMode::Deterministic;
    // nu and xi read W, which deterministic mode forbids.
    assert!(run_experiment(&cfg, &RunOptions::default()).is_err());
}

#[test]
fn two_dimensional_problem_runs() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/parabolic_2d.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert!(out.report.passed, "{:?}", out.report.error);
    let coords = &out.coordinates;
    assert_eq!(coords.len(), 36);
    assert_eq!(coords[0].len(), 2);
}
