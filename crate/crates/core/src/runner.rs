//! The experiment pipeline behind the CLI: assemble, validate, solve, run
//! check suites, and write `report.json`, `trajectories.csv`, `sweep.csv`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ControlChoice, ExperimentConfig, ProblemKind, Reference, Suite};
use crate::continuation::{
    control_from_adjoint, duality_residual_with_controls, hamiltonian_system_residual, measure_contraction_k,
    inner_tolerance, probe_ratios, solve_hamiltonian_system_from, solve_rho_zero, suggested_step, AuxiliaryForcing,
    ContinuationConfig, ContinuationMode, ContinuationReport, MIN_STEP,
};
use crate::control::{
    brute_force_oracle, check_necessary_condition, cost_along, gradient_check, perturbation_test,
    solve_optimal_control, ControlProblem, CostValue, ORACLE_DIM_CAP, ORACLE_TREE_CAP,
};
use crate::error::{Error, Result};
use crate::evolution::{bsee_residual, solve_bsee, solve_decoupled, solve_see, BseeInput, SeeInput};
use crate::hamiltonian::validate_assumptions;
use crate::lattice::{m2_distance, AdaptedProcess, LatticeMode, TripleProcess};
use crate::parabolic::{
    empirical_orders, heat_decay_reference, parabolic_checks, relative_l2_error, weak_solution_residual,
};
use crate::report::CheckRecord;

/// Residual bound for the discrete recursions at a converged solution.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Bound for the duality residual of genuine solutions.
pub const DUALITY_TOL: f64 = 1e-8;
/// A garbage triple must miss the duality identity by at least this much.
pub const DUALITY_GARBAGE_FLOOR: f64 = 1e-3;
/// Stage-0 solution against sequential sweeps.
pub const DECOUPLING_TOL: f64 = 1e-12;
/// Continuation against the dense oracle.
pub const ORACLE_TOL: f64 = 1e-6;
/// Relative tolerance of the closed-form comparisons.
pub const REFERENCE_REL_TOL: f64 = 0.01;
/// Absolute tolerance on `J` in the closed-form comparison.
pub const REFERENCE_COST_TOL: f64 = 0.02;
/// Allowed deviation of empirical convergence orders.
pub const ORDER_TOL: f64 = 0.3;
/// Warm starts must agree to this multiple of the Picard tolerance.
pub const UNIQUENESS_FACTOR: f64 = 100.0;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Pass,
    ConfigError,
    NonConvergence,
    CheckFailure,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Pass => 0,
            ExitStatus::ConfigError => 2,
            ExitStatus::NonConvergence => 3,
            ExitStatus::CheckFailure => 4,
        }
    }

    pub fn for_error(e: &Error) -> Self {
        match e {
            Error::Config { .. } | Error::Input(_) | Error::Dimension { .. } | Error::Lattice(_) | Error::Io(_) => {
                ExitStatus::ConfigError
            }
            Error::Validation(_) | Error::Verification(_) | Error::Coercivity { .. } | Error::NotSpd(_) => {
                ExitStatus::CheckFailure
            }
            _ => ExitStatus::NonConvergence,
        }
    }
}

/// One check record tagged with the suite that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteCheck {
    pub suite: &'static str,
    #[serde(flatten)]
    pub record: CheckRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSummary {
    pub kind: Reference,
    /// Relative error of `y(0)` (`L²` relative error for parabolic runs).
    pub y0_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_error: Option<f64>,
    /// Sup-norm relative gap between `u` and `y` (scalar LQ only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub state_dim: usize,
    pub control_dim: usize,
    pub lattice_nodes: usize,
    pub control: ControlChoice,
    pub cost: CostValue,
    pub y0: Vec<f64>,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continuation: Option<ContinuationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub level: usize,
    pub width: f64,
    pub error: f64,
    pub order: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    /// `steps` or `mesh_n`.
    pub variable: &'static str,
    /// `analytic` or `finest`.
    pub against: &'static str,
    pub expected_order: f64,
    pub rows: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub name: String,
    pub problem: ProblemKind,
    pub mode: LatticeMode,
    pub steps: usize,
    pub horizon: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_n: Option<usize>,
    pub suites: Vec<Suite>,
    pub status: ExitStatus,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    pub checks: Vec<SuiteCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
}

impl Report {
    /// Re-derives `status` and `passed` after checks were appended. Error
    /// statuses are kept.
    pub fn refresh_status(&mut self) {
        if self.status == ExitStatus::Pass && self.checks.iter().any(|c| c.record.failed()) {
            self.status = ExitStatus::CheckFailure;
        }
        self.passed = self.status == ExitStatus::Pass;
    }
}

/// The solution the suites run against.
#[derive(Debug, Clone)]
pub struct Solution {
    pub triple: TripleProcess,
    pub control: AdaptedProcess,
    pub cost: CostValue,
    pub continuation: Option<ContinuationReport>,
}

pub struct Outcome {
    pub report: Report,
    pub problem: Option<ControlProblem>,
    pub solution: Option<Solution>,
    /// Mesh coordinates of the state components (component index for
    /// abstract problems).
    pub coordinates: Vec<Vec<f64>>,
}

impl Outcome {
    pub fn status(&self) -> ExitStatus {
        self.report.status
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Suites to run; the config's list when `None`.
    pub suites: Option<Vec<Suite>>,
    /// Solve even if no selected suite needs the solution.
    pub force_solve: bool,
}

struct Checks(Vec<SuiteCheck>);

impl Checks {
    fn push(&mut self, suite: &'static str, record: CheckRecord) {
        self.0.push(SuiteCheck { suite, record });
    }

    fn bound(&mut self, suite: &'static str, name: &str, value: f64, tol: f64) {
        let ok = value < tol;
        let rec = CheckRecord::new(name, ok, value).with_detail(format!("bound {tol:e}"));
        self.push(suite, rec);
    }

    fn failed(&self) -> bool {
        self.0.iter().any(|c| c.record.failed())
    }
}

fn seed_for(base: u64, salt: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

fn coordinates(cfg: &ExperimentConfig, dim: usize) -> Vec<Vec<f64>> {
    match cfg.parabolic_problem() {
        Ok(p) if cfg.is_parabolic() => p.points(),
        _ => (0..dim).map(|i| vec![i as f64]).collect(),
    }
}

fn base_report(cfg: &ExperimentConfig, suites: &[Suite]) -> Report {
    Report {
        name: cfg.name.clone(),
        problem: cfg.problem,
        mode: cfg.mode,
        steps: cfg.steps,
        horizon: cfg.horizon,
        seed: cfg.seed,
        mesh_n: cfg.parabolic.as_ref().map(|p| p.mesh_n),
        suites: suites.to_vec(),
        status: ExitStatus::Pass,
        passed: true,
        error: None,
        summary: None,
        checks: Vec::new(),
        sweep: None,
    }
}

fn finish(mut report: Report, checks: Checks, error: Option<&Error>) -> Report {
    report.status = match error {
        Some(e) => ExitStatus::for_error(e),
        None if checks.failed() => ExitStatus::CheckFailure,
        None => ExitStatus::Pass,
    };
    report.error = error.map(|e| e.to_string());
    report.passed = report.status == ExitStatus::Pass;
    report.checks = checks.0;
    report
}

/// Solves the configured problem for the configured control.
pub fn solve(problem: &ControlProblem, cfg: &ExperimentConfig) -> Result<Solution> {
    match cfg.control {
        ControlChoice::Optimal => {
            let mut cont = cfg.continuation.clone();
            cont.seed = seed_for(cfg.seed, cont.seed);
            let sol = solve_optimal_control(problem, &cont)?;
            Ok(Solution {
                triple: sol.triple,
                control: sol.control,
                cost: sol.cost,
                continuation: Some(sol.continuation),
            })
        }
        ControlChoice::Zero => {
            let lat = problem.lattice();
            let u = AdaptedProcess::zeros(lat, problem.dynamics.control_dim(), lat.steps());
            let triple = solve_decoupled(problem, &u)?;
            let cost = cost_along(problem, &triple.y, &triple.z, &u);
            Ok(Solution {
                triple,
                control: u,
                cost,
                continuation: None,
            })
        }
    }
}

fn state_forcing(problem: &ControlProblem, u: &AdaptedProcess) -> AdaptedProcess {
    let lat = problem.lattice();
    AdaptedProcess::from_fn(lat, problem.dynamics.dim(), lat.steps(), |i, j| {
        problem.dynamics.state_forcing(i, j, Some(u.get(i, j)), None)
    })
}

/// Residual of the discrete recursions at the solution: the coupled system
/// for the optimal control, the state equation for a fixed control.
fn solution_residual(problem: &ControlProblem, cfg: &ExperimentConfig, sol: &Solution) -> Result<f64> {
    match cfg.control {
        ControlChoice::Optimal => hamiltonian_system_residual(problem, &sol.triple),
        ControlChoice::Zero => Ok(bsee_residual(
            &problem.dynamics,
            &sol.triple.y,
            &sol.triple.z,
            &state_forcing(problem, &sol.control),
        )),
    }
}

fn reference_summary(problem: &ControlProblem, cfg: &ExperimentConfig, sol: &Solution) -> Result<Option<ReferenceSummary>> {
    let Some(kind) = cfg.reference else {
        return Ok(None);
    };
    let y = &sol.triple.y;
    Ok(Some(match kind {
        Reference::ScalarLq => {
            let c = cfg.lq_spec()?.xi0[0];
            let exact = c * (-cfg.horizon).exp();
            let lat = problem.lattice();
            let mut gap: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..lat.steps() {
                gap = gap.max((sol.control.get(i, 0)[0] - y.get(i, 0)[0]).abs());
                scale = scale.max(y.get(i, 0)[0].abs());
            }
            ReferenceSummary {
                kind,
                y0_error: (y.get(0, 0)[0] - exact).abs() / exact.abs(),
                cost_error: Some((sol.cost.total - c * c).abs()),
                control_error: Some(gap / scale),
            }
        }
        Reference::HeatDecay => {
            let mesh_n = cfg.parabolic.as_ref().map_or(0, |p| p.mesh_n);
            let reference = heat_decay_reference(mesh_n, cfg.horizon);
            ReferenceSummary {
                kind,
                y0_error: relative_l2_error(y.get(0, 0), &reference),
                cost_error: None,
                control_error: None,
            }
        }
    }))
}

/// Runs the pipeline. Configuration errors surface as `Err`; solver and
/// check failures are recorded in the returned report.
pub fn run_experiment(cfg: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let mut suites = options.suites.clone().unwrap_or_else(|| cfg.checks.clone());
    suites.sort();
    suites.dedup();
    let report = base_report(cfg, &suites);
    let mut checks = Checks(Vec::new());
    let has = |s: Suite| suites.contains(&s);

    if cfg.is_parabolic() {
        let pp = cfg.parabolic_problem()?;
        pp.check_shape()?;
        let pre = parabolic_checks(&pp, &cfg.lattice()?);
        if pre.iter().any(CheckRecord::failed) {
            for rec in pre {
                checks.push(Suite::Assumptions.name(), rec);
            }
            let err = Error::Validation("parabolic coefficient checks failed; problem not assembled".into());
            return Ok(Outcome {
                report: finish(report, checks, Some(&err)),
                problem: None,
                solution: None,
                coordinates: Vec::new(),
            });
        }
    }
    let problem = cfg.build_problem()?;
    let coords = coordinates(cfg, problem.dynamics.dim());
    let done = |report: Report, checks: Checks, error: Option<&Error>, solution: Option<Solution>, problem: ControlProblem| Outcome {
        report: finish(report, checks, error),
        problem: Some(problem),
        solution,
        coordinates: coords.clone(),
    };

    if has(Suite::Assumptions) {
        let validation = validate_assumptions(&problem, cfg.probes.assumption_probes, seed_for(cfg.seed, 1));
        for rec in validation.checks {
            checks.push(Suite::Assumptions.name(), rec);
        }
        if checks.failed() {
            let err = Error::Validation("assumption checks failed; solve skipped".into());
            return Ok(done(report, checks, Some(&err), None, problem));
        }
    }

    let needs_solution = options.force_solve || suites.is_empty() || suites.iter().any(|s| *s != Suite::Assumptions);
    if !needs_solution {
        return Ok(done(report, checks, None, None, problem));
    }
    let sol = match solve(&problem, cfg) {
        Ok(s) => s,
        Err(e) => return Ok(done(report, checks, Some(&e), None, problem)),
    };
    let mut report = report;
    let result = (|| -> Result<()> {
        let residual = solution_residual(&problem, cfg, &sol)?;
        let name = match cfg.control {
            ControlChoice::Optimal => "fixed-point-residual",
            ControlChoice::Zero => "state-residual",
        };
        checks.bound("solve", name, residual, RESIDUAL_TOL);
        if cfg.is_parabolic() {
            let weak = weak_solution_residual(
                &problem,
                &sol.triple.y,
                &sol.triple.z,
                &sol.control,
                cfg.probes.weak_test_functions,
                seed_for(cfg.seed, 2),
            )?;
            checks.bound("solve", "weak-solution-residual", weak, RESIDUAL_TOL);
        }
        let reference = reference_summary(&problem, cfg, &sol)?;
        if let Some(r) = &reference {
            checks.bound("reference", "reference-y0", r.y0_error, REFERENCE_REL_TOL);
            if let Some(e) = r.cost_error {
                checks.bound("reference", "reference-cost", e, REFERENCE_COST_TOL);
            }
            if let Some(e) = r.control_error {
                checks.bound("reference", "reference-control", e, REFERENCE_REL_TOL);
            }
        }
        report.summary = Some(Summary {
            state_dim: problem.dynamics.dim(),
            control_dim: problem.dynamics.control_dim(),
            lattice_nodes: problem.lattice().total_nodes(problem.lattice().steps() + 1),
            control: cfg.control,
            cost: sol.cost,
            y0: sol.triple.y.get(0, 0).iter().copied().collect(),
            residual,
            continuation: sol.continuation.clone(),
            reference,
        });

        if has(Suite::Optimality) {
            optimality_suite(&problem, cfg, &sol, &mut checks)?;
        }
        if has(Suite::Contraction) {
            contraction_suite(&problem, cfg, &sol, &mut checks)?;
        }
        if has(Suite::Duality) {
            duality_suite(&problem, cfg, &sol, &mut checks)?;
        }
        if has(Suite::Oracle) {
            oracle_suite(&problem, cfg, &sol, &mut checks)?;
        }
        if has(Suite::Convergence) {
            let table = convergence_sweep(cfg, &cfg.convergence.levels)?;
            checks.push(Suite::Convergence.name(), sweep_check(&table));
            report.sweep = Some(table);
        }
        Ok(())
    })();
    let err = result.err();
    Ok(done(report, checks, err.as_ref(), Some(sol), problem))
}

fn skip_unless_optimal(cfg: &ExperimentConfig, suite: Suite, checks: &mut Checks) -> bool {
    if cfg.control != ControlChoice::Optimal {
        checks.push(suite.name(), CheckRecord::skip(suite.name(), "needs the optimal control"));
        return true;
    }
    false
}

fn optimality_suite(problem: &ControlProblem, cfg: &ExperimentConfig, sol: &Solution, checks: &mut Checks) -> Result<()> {
    let name = Suite::Optimality.name();
    if skip_unless_optimal(cfg, Suite::Optimality, checks) {
        return Ok(());
    }
    checks.push(name, check_necessary_condition(problem, &sol.triple, &sol.control)?);
    let p = &cfg.probes;
    checks.push(
        name,
        perturbation_test(problem, &sol.control, p.perturbation_directions, p.perturbation_eps, seed_for(cfg.seed, 3))?,
    );
    checks.push(name, gradient_check(problem, p.gradient_controls, seed_for(cfg.seed, 4))?);
    Ok(())
}

/// Ratios of ℐ from ρ0 = 0 to ρ = δ at the suggested step over
/// `pairs` random probe pairs.
pub fn contraction_probe_check(
    problem: &ControlProblem,
    report: &ContinuationReport,
    pairs: usize,
    seed: u64,
) -> Result<(CheckRecord, Vec<f64>)> {
    let lat = problem.lattice();
    let c = report.monotonicity_c;
    let zero = AuxiliaryForcing::zeros(lat, problem.dynamics.dim());
    let base = solve_rho_zero(problem, c, &zero)?;
    let k = match report.measured_k {
        Some(k) => k,
        None => measure_contraction_k(problem, c, &base, &zero, 6, seed)?,
    };
    let delta = suggested_step(k).max(MIN_STEP);
    let mut solver = |f: &AuxiliaryForcing| solve_rho_zero(problem, c, f);
    let ratios = probe_ratios(problem, c, &base, delta, &zero, pairs, seed, &mut solver)?;
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    let ok = ratios.len() == pairs && worst < 1.0;
    let rec = CheckRecord::new("contraction-probes", ok, worst)
        .with_detail(format!("{} pairs at delta {delta:.6}, measured K {k:.6}", ratios.len()));
    Ok((rec, ratios))
}

/// Picard increments never grow after the second iteration.
///
/// With `inexact_slack`, stages whose nested solves are inexact (recursive
/// stages beyond the first) may grow by the two inner tolerances involved,
/// since a perturbed contraction only guarantees
/// `inc_k <= alpha inc_{k-1} + eps_k + eps_{k-1}`. Stage 1 and flat mode
/// call the exact decoupled solver and are always held to strict decay.
pub fn monotone_increments_check(report: &ContinuationReport, picard_tol: f64, inexact_slack: bool) -> CheckRecord {
    let mut witness = None;
    let mut margin = f64::INFINITY;
    let mut strict_violations = 0usize;
    for (stage, inc) in report.picard_increments.iter().enumerate() {
        let inexact = inexact_slack && stage >= 2 && report.mode == ContinuationMode::Recursive;
        let eps = |k: usize| {
            let last = if k == 0 { f64::INFINITY } else { inc[k - 1] };
            inner_tolerance(picard_tol, last)
        };
        for k in 2..inc.len() {
            let allowance = if inexact { eps(k) + eps(k - 1) } else { 0.0 };
            let slack = inc[k - 1] + allowance - inc[k];
            if inc[k] > inc[k - 1] {
                strict_violations += 1;
            }
            margin = margin.min(slack);
            if slack < 0.0 && witness.is_none() {
                witness = Some(format!(
                    "stage {stage}: increment {} = {:.6e} exceeds increment {} = {:.6e}",
                    k + 1,
                    inc[k],
                    k,
                    inc[k - 1]
                ));
            }
        }
    }
    let ok = witness.is_none();
    let detail = if inexact_slack {
        format!("{strict_violations} strict increases, within inner-solve tolerances")
    } else {
        format!("{strict_violations} strict increases")
    };
    CheckRecord::new("picard-monotone", ok, if margin.is_finite() { margin } else { 0.0 })
        .with_witness(witness)
        .with_detail(detail)
}

/// Solves from random warm starts and compares all solutions pairwise.
pub fn uniqueness_check(
    problem: &ControlProblem,
    config: &ContinuationConfig,
    reference: &TripleProcess,
    step: f64,
    starts: usize,
    seed: u64,
) -> Result<CheckRecord> {
    let lat = problem.lattice();
    let triple = problem.triple();
    let mut cont = config.clone();
    cont.step_delta = Some(step);
    cont.measure_k = false;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sols = vec![reference.clone()];
    for _ in 0..starts {
        let init = TripleProcess::random(lat, problem.dynamics.dim(), 1.0, &mut rng);
        sols.push(solve_hamiltonian_system_from(problem, &cont, Some(&init))?.0);
    }
    let mut worst: f64 = 0.0;
    let mut pair = (0, 0);
    for a in 0..sols.len() {
        for b in a + 1..sols.len() {
            let d = m2_distance(&sols[a], &sols[b], lat, triple)?;
            if d > worst {
                worst = d;
                pair = (a, b);
            }
        }
    }
    let tol = UNIQUENESS_FACTOR * config.picard_tol;
    let ok = worst <= tol;
    Ok(CheckRecord::new("uniqueness", ok, worst)
        .with_detail(format!("{starts} warm starts, bound {tol:e}"))
        .with_witness((!ok).then(|| format!("solutions {} and {} differ by {worst:.6e}", pair.0, pair.1))))
}

fn contraction_suite(problem: &ControlProblem, cfg: &ExperimentConfig, sol: &Solution, checks: &mut Checks) -> Result<()> {
    let name = Suite::Contraction.name();
    if skip_unless_optimal(cfg, Suite::Contraction, checks) {
        return Ok(());
    }
    let report = sol.continuation.as_ref().expect("optimal solve has a continuation report");
    let (rec, _) = contraction_probe_check(problem, report, cfg.probes.contraction_pairs, seed_for(cfg.seed, 5))?;
    checks.push(name, rec);
    let stage = report.contraction_ratios.iter().flatten().copied().fold(0.0, f64::max);
    checks.push(name, CheckRecord::new("stage-contraction", stage < 1.0, stage));
    checks.push(name, monotone_increments_check(report, cfg.continuation.picard_tol, true));
    checks.push(
        name,
        uniqueness_check(
            problem,
            &cfg.continuation,
            &sol.triple,
            report.step_delta,
            cfg.probes.warm_starts,
            seed_for(cfg.seed, 6),
        )?,
    );
    Ok(())
}

fn duality_suite(problem: &ControlProblem, cfg: &ExperimentConfig, sol: &Solution, checks: &mut Checks) -> Result<()> {
    let name = Suite::Duality.name();
    let lat = problem.lattice();
    let m = problem.dynamics.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 7));
    let mut random_control = || AdaptedProcess::random(lat, m, lat.steps(), 1.0, &mut rng);

    let u_sol = match cfg.control {
        ControlChoice::Optimal => control_from_adjoint(problem, &sol.triple.k)?,
        ControlChoice::Zero => sol.control.clone(),
    };
    let bumped = u_sol.add_scaled(&random_control(), 1e-2);
    let other = solve_decoupled(problem, &bumped)?;
    let r = duality_residual_with_controls(problem, &sol.triple, &u_sol, &other, &bumped)?;
    checks.bound(name, "duality-solution", r, DUALITY_TOL);

    let (u1, u2) = (random_control(), random_control());
    let (l1, l2) = (solve_decoupled(problem, &u1)?, solve_decoupled(problem, &u2)?);
    let r = duality_residual_with_controls(problem, &l1, &u1, &l2, &u2)?;
    checks.bound(name, "duality-decoupled-pair", r, DUALITY_TOL);

    let mut grng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 8));
    let garbage = TripleProcess::random(lat, problem.dynamics.dim(), 1.0, &mut grng);
    let ug = random_control();
    let r = duality_residual_with_controls(problem, &garbage, &ug, &l1, &u1)?;
    let ok = r > DUALITY_GARBAGE_FLOOR;
    checks.push(
        name,
        CheckRecord::new("duality-negative-control", ok, r)
            .with_detail(format!("random triple must miss the identity by more than {DUALITY_GARBAGE_FLOOR:e}")),
    );
    Ok(())
}

/// Sequential state-then-adjoint sweeps for the ρ = 0 system.
pub fn sequential_rho_zero(problem: &ControlProblem, c: f64) -> Result<TripleProcess> {
    let n = problem.lattice().steps();
    let (y, z) = solve_bsee(&problem.dynamics, BseeInput::default())?;
    let init = |y0: &DVector<f64>| -problem.integrand.terminal_grad(y0);
    let k = solve_see(
        &problem.dynamics,
        &SeeInput {
            initial: &init,
            drift: &y.truncated(n).scale(c),
            diffusion: &z.scale(c),
        },
        y.get(0, 0),
    )?;
    Ok(TripleProcess { k, y, z })
}

fn oracle_suite(problem: &ControlProblem, cfg: &ExperimentConfig, sol: &Solution, checks: &mut Checks) -> Result<()> {
    let name = Suite::Oracle.name();
    let lat = problem.lattice();
    let c = sol
        .continuation
        .as_ref()
        .map(|r| r.monotonicity_c)
        .unwrap_or_else(|| problem.integrand.monotonicity_c());
    let zero = AuxiliaryForcing::zeros(lat, problem.dynamics.dim());
    let stage0 = solve_rho_zero(problem, c, &zero)?;
    let seq = sequential_rho_zero(problem, c)?;
    let d = m2_distance(&stage0, &seq, lat, problem.triple())?;
    checks.bound(name, "rho-zero-decoupling", d, DECOUPLING_TOL);

    if skip_unless_optimal(cfg, Suite::Oracle, checks) {
        return Ok(());
    }
    let small = lat.mode() == LatticeMode::Tree && lat.steps() <= ORACLE_TREE_CAP && problem.dynamics.dim() <= ORACLE_DIM_CAP;
    if !small {
        checks.push(
            name,
            CheckRecord::skip(
                "brute-force-oracle",
                format!("dense oracle needs a tree with N <= {ORACLE_TREE_CAP} and dimension <= {ORACLE_DIM_CAP}"),
            ),
        );
        return Ok(());
    }
    let dense = brute_force_oracle(problem)?;
    let d = m2_distance(&dense, &sol.triple, lat, problem.triple())?;
    checks.bound(name, "brute-force-oracle", d, ORACLE_TOL);
    Ok(())
}

pub fn sweep_check(table: &SweepTable) -> CheckRecord {
    let orders: Vec<f64> = table.rows.iter().filter_map(|r| r.order).collect();
    let dev = orders.iter().map(|o| (o - table.expected_order).abs()).fold(0.0, f64::max);
    let ok = table.aborted.is_none() && !orders.is_empty() && dev <= ORDER_TOL && orders.iter().all(|o| o.is_finite());
    let rec = CheckRecord::new("convergence-order", ok, ORDER_TOL - dev).with_detail(format!(
        "orders {orders:?} against {} over {} levels, expected {}",
        table.against,
        table.rows.len(),
        table.expected_order
    ));
    match &table.aborted {
        Some(why) => rec.with_witness(Some(why.clone())),
        None if !ok => rec.with_witness(Some(format!("largest deviation from order {} is {dev:.3}", table.expected_order))),
        None => rec,
    }
}

/// Re-runs the config at each refinement level and tabulates errors and
/// empirical orders. Levels are time steps for abstract problems and mesh
/// sizes for parabolic ones; errors are against the analytic reference when
/// one is configured, otherwise against the finest level.
pub fn convergence_sweep(cfg: &ExperimentConfig, levels: &[usize]) -> Result<SweepTable> {
    if levels.len() < 2 {
        return Err(Error::Config {
            field: "convergence.levels".into(),
            message: "a sweep needs at least two levels".into(),
        });
    }
    let parabolic = cfg.is_parabolic();
    let variable = if parabolic { "mesh_n" } else { "steps" };
    let analytic = cfg.reference.is_some();
    let mut table = SweepTable {
        variable,
        against: if analytic { "analytic" } else { "finest" },
        expected_order: if parabolic { 2.0 } else { 1.0 },
        rows: Vec::new(),
        aborted: None,
    };
    let mut values: Vec<(usize, f64, DVector<f64>)> = Vec::new();
    for &level in levels {
        let at = cfg.at_level(level)?;
        let step = (|| -> Result<(f64, DVector<f64>)> {
            let problem = at.build_problem()?;
            let sol = solve(&problem, &at)?;
            let width = if parabolic {
                1.0 / (level as f64 + 1.0)
            } else {
                at.horizon / level as f64
            };
            Ok((width, sol.triple.y.get(0, 0).clone()))
        })();
        match step {
            Ok((w, y0)) => values.push((level, w, y0)),
            Err(e) => {
                table.aborted = Some(format!("level {level}: {e}"));
                break;
            }
        }
    }
    let errors: Vec<(usize, f64, f64)> = if analytic {
        values
            .iter()
            .map(|(level, w, y0)| {
                let err = match cfg.reference {
                    Some(Reference::HeatDecay) => relative_l2_error(y0, &heat_decay_reference(*level, cfg.horizon)),
                    _ => {
                        let c = cfg.lq_spec().map(|s| s.xi0[0]).unwrap_or(1.0);
                        let exact = c * (-cfg.horizon).exp();
                        (y0[0] - exact).abs() / exact.abs()
                    }
                };
                (*level, *w, err)
            })
            .collect()
    } else if let Some((fine_level, _, fine)) = values.last().filter(|_| table.aborted.is_none()) {
        let mut out = Vec::new();
        for (level, w, y0) in &values[..values.len() - 1] {
            let err = if parabolic {
                restrict_error(y0, *level, fine, *fine_level, cfg.space_dim()).ok_or_else(|| Error::Config {
                    field: "convergence.levels".into(),
                    message: format!("mesh {level} is not nested in mesh {fine_level}"),
                })?
            } else {
                (y0 - fine).norm() / fine.norm().max(f64::MIN_POSITIVE)
            };
            out.push((*level, *w, err));
        }
        out
    } else {
        Vec::new()
    };
    let errs: Vec<f64> = errors.iter().map(|e| e.2).collect();
    let widths: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let orders = empirical_orders(&errs, &widths);
    for (idx, (level, width, error)) in errors.into_iter().enumerate() {
        table.rows.push(SweepRow {
            level,
            width,
            error,
            order: idx.checked_sub(1).map(|k| orders[k]),
        });
    }
    Ok(table)
}

/// Relative error of a coarse mesh solution against the fine one sampled at
/// the coarse points; `None` when the meshes are not nested.
fn restrict_error(coarse: &DVector<f64>, coarse_n: usize, fine: &DVector<f64>, fine_n: usize, dim: usize) -> Option<f64> {
    if !(fine_n + 1).is_multiple_of(coarse_n + 1) {
        return None;
    }
    let r = (fine_n + 1) / (coarse_n + 1);
    let sample = DVector::from_fn(coarse.len(), |p, _| {
        let (ix, iy) = (p % coarse_n, p / coarse_n);
        let fx = (ix + 1) * r - 1;
        let fy = if dim == 2 { (iy + 1) * r - 1 } else { 0 };
        fine[fx + fy * fine_n]
    });
    Some((coarse - &sample).norm() / sample.norm().max(f64::MIN_POSITIVE))
}

fn fmt_coord(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// `t,x,node,y,z,k,u` rows, one per time level, node and state component.
/// `z` and `u` are empty at the terminal level.
pub fn trajectories_csv(problem: &ControlProblem, sol: &Solution, coords: &[Vec<f64>]) -> String {
    let lat = problem.lattice();
    let n = lat.steps();
    let mut out = String::from("t,x,node,y,z,k,u\n");
    let same_dim = sol.control.dim() == sol.triple.y.dim();
    for i in 0..=n {
        let t = lat.grid().time(i);
        for j in 0..lat.node_count(i) {
            let y = sol.triple.y.get(i, j);
            let k = sol.triple.k.get(i, j);
            for p in 0..y.len() {
                let x = coords.get(p).map_or_else(|| p.to_string(), |c| fmt_coord(c));
                let (z, u) = if i < n {
                    let z = sol.triple.z.get(i, j)[p].to_string();
                    let u = if same_dim { sol.control.get(i, j)[p].to_string() } else { String::new() };
                    (z, u)
                } else {
                    (String::new(), String::new())
                };
                let _ = writeln!(out, "{t},{x},{j},{},{z},{},{u}", y[p], k[p]);
            }
        }
    }
    out
}

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("level,error,order\n");
    for r in &table.rows {
        let order = r.order.map(|o| o.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{order}", r.level, r.error);
    }
    out
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `report.json`, plus `trajectories.csv` when a solution exists and
/// `sweep.csv` when a sweep ran.
pub fn write_outputs(outcome: &Outcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(&outcome.report))?;
    if let (Some(problem), Some(sol)) = (&outcome.problem, &outcome.solution) {
        std::fs::write(dir.join("trajectories.csv"), trajectories_csv(problem, sol, &outcome.coordinates))?;
    }
    if let Some(table) = &outcome.report.sweep {
        std::fs::write(dir.join("sweep.csv"), sweep_csv(table))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text).unwrap()
    }

    const UNIT: &str = r#"
name = "unit"
problem = "lq-abstract"
mode = "deterministic"
steps = 32
reference = "scalar-lq"
[lq]
[continuation]
picard_tol = 1e-11
"#;

    #[test]
    fn exit_codes() {
        assert_eq!(ExitStatus::Pass.code(), 0);
        assert_eq!(ExitStatus::for_error(&Error::Config { field: "f".into(), message: "m".into() }).code(), 2);
        let nc = Error::NonConvergence {
            rho: 1.0,
            iterations: 3,
            last_increment: 1.0,
            ratio: 2.0,
        };
        assert_eq!(ExitStatus::for_error(&nc).code(), 3);
        assert_eq!(ExitStatus::for_error(&Error::Validation("x".into())).code(), 4);
    }

    #[test]
    fn unit_lq_passes_and_matches_reference() {
        let out = run_experiment(&cfg(&UNIT.replace("steps = 32", "steps = 256")), &RunOptions::default()).unwrap();
        assert_eq!(out.status(), ExitStatus::Pass, "{}", report_json(&out.report));
        let r = out.report.summary.unwrap().reference.unwrap();
        assert!(r.y0_error < REFERENCE_REL_TOL, "{r:?}");
    }

    #[test]
    fn assumption_failure_skips_solve() {
        let text = UNIT.replace("reference = \"scalar-lq\"", "checks = [\"assumptions\", \"optimality\"]").replace("[lq]", "[lq]\nn = -1.0");
        let out = run_experiment(&cfg(&text), &RunOptions::default()).unwrap();
        assert_eq!(out.status(), ExitStatus::CheckFailure);
        assert!(out.solution.is_none());
        let failed: Vec<&str> = out.report.checks.iter().filter(|c| c.record.failed()).map(|c| c.record.name.as_str()).collect();
        assert!(failed.contains(&"gamma-minimizer"), "{failed:?}");
    }

    #[test]
    fn sweep_table_and_csv() {
        let table = convergence_sweep(&cfg(UNIT), &[16, 32, 64]).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.rows[0].order.is_none());
        for r in &table.rows[1..] {
            assert!((r.order.unwrap() - 1.0).abs() < ORDER_TOL, "{table:?}");
        }
        let csv = sweep_csv(&table);
        assert!(csv.starts_with("level,error,order\n16,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn sweep_against_finest_level() {
        let text = UNIT.replace("reference = \"scalar-lq\"", "");
        let table = convergence_sweep(&cfg(&text), &[16, 32, 64, 128]).unwrap();
        assert_eq!(table.against, "finest");
        assert_eq!(table.rows.len(), 3);
    }

    #[test]
    fn nested_restriction() {
        let fine = DVector::from_fn(7, |p, _| p as f64);
        let coarse = DVector::from_vec(vec![1.0, 3.0, 5.0]);
        assert_eq!(restrict_error(&coarse, 3, &fine, 7, 1), Some(0.0));
        assert_eq!(restrict_error(&coarse, 3, &fine, 8, 1), None);
    }

    #[test]
    fn trajectories_have_expected_shape() {
        let c = cfg(&UNIT.replace("steps = 32", "steps = 4"));
        let out = run_experiment(&c, &RunOptions::default()).unwrap();
        let csv = trajectories_csv(out.problem.as_ref().unwrap(), out.solution.as_ref().unwrap(), &out.coordinates);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x,node,y,z,k,u");
        assert_eq!(lines.len(), 1 + 5);
        assert!(lines[5].ends_with(",,") || lines[5].split(',').nth(4) == Some(""));
    }
}
