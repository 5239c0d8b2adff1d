//! Control problems, costs, optimality checks and a dense brute-force oracle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::continuation::{control_from_adjoint, solve_hamiltonian_system, ContinuationConfig, ContinuationReport};
use crate::error::{check_dim, Error, Result};
use crate::evolution::{conditional_adjoint, solve_bsee, solve_decoupled, BseeInput, Dynamics};
use crate::gelfand::{EvolutionCoefficients, GelfandTriple, MatrixFamily, VectorFamily};
use crate::hamiltonian::{hamiltonian_grad_u, Integrand, LqIntegrand, LqMinimizer, Minimizer};
use crate::lattice::{AdaptedProcess, BrownianLattice, LatticeMode, TimeGrid, TripleProcess};
use crate::report::{CheckRecord, Worst};

/// Dynamics, cost and minimizer of one discretized control problem.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub dynamics: Dynamics,
    pub integrand: Arc<dyn Integrand>,
    pub minimizer: Arc<dyn Minimizer>,
    /// Checks run by the front-end before assembly (reported with the
    /// sampled assumption checks).
    pub pre_checks: Vec<CheckRecord>,
}

impl ControlProblem {
    pub fn new(dynamics: Dynamics, integrand: Arc<dyn Integrand>, minimizer: Arc<dyn Minimizer>) -> Self {
        Self {
            dynamics,
            integrand,
            minimizer,
            pre_checks: Vec::new(),
        }
    }

    pub fn with_pre_checks(mut self, checks: Vec<CheckRecord>) -> Self {
        self.pre_checks = checks;
        self
    }

    pub fn lattice(&self) -> &BrownianLattice {
        &self.dynamics.lattice
    }

    pub fn triple(&self) -> &GelfandTriple {
        &self.dynamics.triple
    }

    pub fn control_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (&self.dynamics.coeffs.mass_u * b).dot(a)
    }
}

/// Coefficients of a linear-quadratic problem on the identity triple.
/// The terminal datum is `ξ = xi0 + xi1 W_T`.
#[derive(Debug, Clone)]
pub struct LqSpec {
    pub mode: LatticeMode,
    pub horizon: f64,
    pub steps: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub g: DVector<f64>,
    pub xi0: DVector<f64>,
    pub xi1: DVector<f64>,
    pub m: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub perturbation: f64,
    pub monotonicity_c: Option<f64>,
    pub lambda: f64,
}

impl LqSpec {
    /// Scalar problem with `A = B = G = 0`, `D = M = Q = N = h = 1`, `ξ = 1`
    /// and `T = 1`.
    pub fn unit(mode: LatticeMode, steps: usize) -> Self {
        let one = DMatrix::identity(1, 1);
        Self {
            mode,
            horizon: 1.0,
            steps,
            a: DMatrix::zeros(1, 1),
            b: DMatrix::zeros(1, 1),
            d: one.clone(),
            g: DVector::zeros(1),
            xi0: DVector::from_element(1, 1.0),
            xi1: DVector::zeros(1),
            m: one.clone(),
            q: one.clone(),
            n: one.clone(),
            h: one,
            perturbation: 0.0,
            monotonicity_c: None,
            lambda: 1.0,
        }
    }

    /// Sets `M = Q = N = h = δ I`.
    pub fn with_weights(mut self, delta: f64) -> Self {
        let dim = self.a.nrows();
        let w = DMatrix::identity(dim, dim) * delta;
        self.m = w.clone();
        self.q = w.clone();
        self.h = w;
        self.n = DMatrix::identity(self.d.ncols(), self.d.ncols()) * delta;
        self
    }
}

pub fn lq_problem(spec: &LqSpec) -> Result<ControlProblem> {
    let dim = spec.a.nrows();
    let lattice = BrownianLattice::new(TimeGrid::new(spec.horizon, spec.steps)?, spec.mode)?;
    check_dim("xi1 length", dim, spec.xi1.len())?;
    let xi = if spec.xi1.iter().all(|v| *v == 0.0) {
        VectorFamily::Constant(spec.xi0.clone())
    } else {
        let (x0, x1) = (spec.xi0.clone(), spec.xi1.clone());
        VectorFamily::random(move |_, w| &x0 + &x1 * w)
    };
    let coeffs = EvolutionCoefficients::new(
        MatrixFamily::Constant(spec.a.clone()),
        MatrixFamily::Constant(spec.b.clone()),
        MatrixFamily::Constant(spec.d.clone()),
        VectorFamily::Constant(spec.g.clone()),
        xi,
    )?
    .with_lambda(spec.lambda);
    let triple = GelfandTriple::identity(dim);
    let mass_u = coeffs.mass_u.clone();
    let mut integrand = LqIntegrand::new(
        &triple,
        &mass_u,
        spec.m.clone(),
        spec.q.clone(),
        spec.n.clone(),
        spec.h.clone(),
    )?
    .with_perturbation(spec.perturbation);
    if let Some(c) = spec.monotonicity_c {
        integrand = integrand.with_monotonicity_c(c);
    }
    let minimizer = LqMinimizer::new(&integrand);
    let dynamics = Dynamics::new(triple, coeffs, lattice)?;
    Ok(ControlProblem::new(dynamics, Arc::new(integrand), Arc::new(minimizer)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostValue {
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
}

/// `E Σ_{i<N} dt l(y_i, z_i, u_i) + h(y_0)` along given processes.
pub fn cost_along(
    problem: &ControlProblem,
    y: &AdaptedProcess,
    z: &AdaptedProcess,
    u: &AdaptedProcess,
) -> CostValue {
    let lat = problem.lattice();
    let dt = lat.dt();
    let mut running = 0.0;
    for i in 0..lat.steps() {
        let vals: Vec<f64> = (0..lat.node_count(i))
            .map(|j| problem.integrand.running(i, lat.w(i, j), y.get(i, j), z.get(i, j), u.get(i, j)))
            .collect();
        running += dt * lat.expectation_of(i, &vals);
    }
    let terminal = problem.integrand.terminal(y.get(0, 0));
    CostValue {
        running,
        terminal,
        total: running + terminal,
    }
}

/// Cost of control `u`: solves the state equation, then sums.
pub fn evaluate_cost(problem: &ControlProblem, u: &AdaptedProcess) -> Result<CostValue> {
    if !u.is_finite() {
        return Err(Error::NonFinite("control".into()));
    }
    let (y, z) = solve_bsee(
        &problem.dynamics,
        BseeInput {
            control: Some(u),
            extra_forcing: None,
        },
    )?;
    Ok(cost_along(problem, &y, &z, u))
}

/// `𝓗_u = D*κ + l_u` on every node, with `κ = E_i[k_{i+1}]`.
pub fn hamiltonian_gradient(problem: &ControlProblem, lam: &TripleProcess, u: &AdaptedProcess) -> Result<AdaptedProcess> {
    let lat = problem.lattice();
    let kappa = conditional_adjoint(&lam.k, lat);
    let mut out = AdaptedProcess::zeros(lat, u.dim(), lat.steps());
    for i in 0..lat.steps() {
        for j in 0..lat.node_count(i) {
            let g = hamiltonian_grad_u(problem, i, j, lam.y.get(i, j), lam.z.get(i, j), u.get(i, j), kappa.get(i, j))?;
            out.set(i, j, g);
        }
    }
    Ok(out)
}

/// `E Σ dt (𝓗_u, v)_U` at control `u`: the derivative of the cost along `v`.
pub fn directional_derivative(problem: &ControlProblem, u: &AdaptedProcess, v: &AdaptedProcess) -> Result<f64> {
    let lam = solve_decoupled(problem, u)?;
    let grad = hamiltonian_gradient(problem, &lam, u)?;
    let lat = problem.lattice();
    let mut total = 0.0;
    for i in 0..lat.steps() {
        let vals: Vec<f64> = (0..lat.node_count(i))
            .map(|j| problem.control_inner(grad.get(i, j), v.get(i, j)))
            .collect();
        total += lat.dt() * lat.expectation_of(i, &vals);
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalControl {
    #[serde(skip)]
    pub triple: TripleProcess,
    #[serde(skip)]
    pub control: AdaptedProcess,
    pub cost: CostValue,
    pub continuation: ContinuationReport,
}

/// Solves the coupled system and reads off `u* = γ(D*κ)`.
pub fn solve_optimal_control(problem: &ControlProblem, config: &ContinuationConfig) -> Result<OptimalControl> {
    let (triple, continuation) = solve_hamiltonian_system(problem, config)?;
    let control = control_from_adjoint(problem, &triple.k)?;
    let cost = cost_along(problem, &triple.y, &triple.z, &control);
    Ok(OptimalControl {
        triple,
        control,
        cost,
        continuation,
    })
}

pub const STATIONARITY_TOL: f64 = 1e-6;
pub const PERTURBATION_SLACK: f64 = 1e-9;
pub const GRADIENT_REL_TOL: f64 = 1e-5;

/// Sup-node `‖𝓗_u‖_U` at the candidate `(lam, u)`.
pub fn check_necessary_condition(problem: &ControlProblem, lam: &TripleProcess, u: &AdaptedProcess) -> Result<CheckRecord> {
    let grad = hamiltonian_gradient(problem, lam, u)?;
    let lat = problem.lattice();
    let mut worst = Worst::max();
    for i in 0..lat.steps() {
        for j in 0..lat.node_count(i) {
            let g = grad.get(i, j);
            let norm = problem.control_inner(g, g).max(0.0).sqrt();
            worst.raise(norm, || format!("time index {i}, node {j}: |H_u| = {norm:.6e}"));
        }
    }
    let passed = worst.value < STATIONARITY_TOL;
    Ok(CheckRecord::new("stationarity", passed, worst.value).with_witness(if passed { None } else { worst.witness }))
}

/// `J(u* + ε v) ≥ J(u*) − slack` for random adapted directions `v`.
pub fn perturbation_test(
    problem: &ControlProblem,
    u_star: &AdaptedProcess,
    directions: usize,
    eps: f64,
    seed: u64,
) -> Result<CheckRecord> {
    let lat = problem.lattice();
    let base = evaluate_cost(problem, u_star)?.total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::min();
    for d in 0..directions {
        let v = AdaptedProcess::random(lat, u_star.dim(), lat.steps(), 1.0, &mut rng);
        let moved = evaluate_cost(problem, &u_star.add_scaled(&v, eps))?.total;
        let gain = moved - base;
        worst.lower(gain, || format!("direction {d}: J changes by {gain:.6e}"));
    }
    let passed = worst.value >= -PERTURBATION_SLACK;
    Ok(CheckRecord::new("perturbation", passed, worst.value).with_witness(if passed { None } else { worst.witness }))
}

/// Central differences of `J` against `E Σ dt (𝓗_u, v)` at random controls.
pub fn gradient_check(problem: &ControlProblem, controls: usize, seed: u64) -> Result<CheckRecord> {
    let lat = problem.lattice();
    let m = problem.dynamics.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4;
    let mut worst = Worst::max();
    for c in 0..controls {
        let u = AdaptedProcess::random(lat, m, lat.steps(), 1.0, &mut rng);
        let v = AdaptedProcess::random(lat, m, lat.steps(), 1.0, &mut rng);
        let plus = evaluate_cost(problem, &u.add_scaled(&v, eps))?.total;
        let minus = evaluate_cost(problem, &u.add_scaled(&v, -eps))?.total;
        let fd = (plus - minus) / (2.0 * eps);
        let an = directional_derivative(problem, &u, &v)?;
        let rel = (fd - an).abs() / an.abs().max(f64::MIN_POSITIVE);
        worst.raise(rel, || format!("control {c}: finite difference {fd:.12e} vs adjoint {an:.12e}"));
    }
    let passed = worst.value < GRADIENT_REL_TOL;
    Ok(CheckRecord::new("gradient-consistency", passed, worst.value).with_witness(if passed { None } else { worst.witness }))
}

/// Largest tree depth the dense oracle accepts.
pub const ORACLE_TREE_CAP: usize = 3;
/// Largest state dimension the dense oracle accepts.
pub const ORACLE_DIM_CAP: usize = 2;
const ORACLE_UNKNOWN_CAP: usize = 1024;

struct Layout {
    dim: usize,
    k_offsets: Vec<usize>,
    y_offsets: Vec<usize>,
    z_offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(lat: &BrownianLattice, dim: usize) -> Self {
        let n = lat.steps();
        let mut next = 0;
        let mut take = |levels: usize| {
            (0..levels)
                .map(|i| {
                    let at = next;
                    next += lat.node_count(i) * dim;
                    at
                })
                .collect::<Vec<_>>()
        };
        let k_offsets = take(n + 1);
        let y_offsets = take(n);
        let z_offsets = take(n);
        Self {
            dim,
            k_offsets,
            y_offsets,
            z_offsets,
            total: next,
        }
    }

    fn slice(&self, x: &DVector<f64>, offset: usize, node: usize) -> DVector<f64> {
        x.rows(offset + node * self.dim, self.dim).into_owned()
    }

    fn unpack(&self, problem: &ControlProblem, x: &DVector<f64>) -> TripleProcess {
        let lat = problem.lattice();
        let n = lat.steps();
        let mut y = AdaptedProcess::zeros(lat, self.dim, n + 1);
        for j in 0..lat.node_count(n) {
            y.set(n, j, problem.dynamics.xi(j));
        }
        let mut z = AdaptedProcess::zeros(lat, self.dim, n);
        let mut k = AdaptedProcess::zeros(lat, self.dim, n + 1);
        for i in 0..=n {
            for j in 0..lat.node_count(i) {
                k.set(i, j, self.slice(x, self.k_offsets[i], j));
                if i < n {
                    y.set(i, j, self.slice(x, self.y_offsets[i], j));
                    z.set(i, j, self.slice(x, self.z_offsets[i], j));
                }
            }
        }
        TripleProcess { k, y, z }
    }
}

/// Every discrete equation of the coupled system, stacked.
fn oracle_residual(problem: &ControlProblem, lam: &TripleProcess) -> Result<DVector<f64>> {
    let dynamics = &problem.dynamics;
    let lat = problem.lattice();
    let n = lat.steps();
    let dt = lat.dt();
    let s = dt.sqrt();
    let tree = lat.mode() == LatticeMode::Tree;
    let mut out: Vec<f64> = Vec::new();
    let y0 = lam.y.get(0, 0);
    out.extend((lam.k.get(0, 0) + problem.integrand.terminal_grad(y0)).iter());
    for i in 0..n {
        for j in 0..lat.node_count(i) {
            let w = lat.w(i, j);
            let (yi, zi, ki) = (lam.y.get(i, j), lam.z.get(i, j), lam.k.get(i, j));
            let (y_kids, k_kids): (Vec<_>, Vec<_>) = lat
                .children(j)
                .map(|c| (lam.y.get(i + 1, c), lam.k.get(i + 1, c)))
                .unzip();
            let mean = |v: &[&DVector<f64>]| v.iter().fold(DVector::zeros(yi.len()), |a, b| a + *b) / v.len() as f64;
            let kappa = mean(&k_kids);
            let u = problem.minimizer.gamma(i, j, &(&*dynamics.adjoint_d(i, j) * &kappa))?;
            let a = dynamics.a(i, j);
            let r = yi + &*a * yi * dt - mean(&y_kids)
                + (&*dynamics.b(i, j) * zi + &*dynamics.d(i, j) * &u + &*dynamics.g(i, j)) * dt;
            out.extend(r.iter());
            let r = if tree {
                zi - (y_kids[0] - y_kids[1]) / (2.0 * s)
            } else {
                zi.clone()
            };
            out.extend(r.iter());
            let r = &kappa + &*dynamics.adjoint_a(i, j) * &kappa * dt - ki
                + problem.integrand.grad_y(i, w, yi, zi, &u) * dt;
            out.extend(r.iter());
            if tree {
                let vol = &*dynamics.adjoint_b(i, j) * &kappa + problem.integrand.grad_z(i, w, yi, zi, &u);
                let r = k_kids[0] - k_kids[1] + vol * (2.0 * s);
                out.extend(r.iter());
            }
        }
    }
    Ok(DVector::from_vec(out))
}

/// Assembles all discrete equations of the coupled system over every node
/// and solves them directly (Newton with a finite-difference Jacobian; one
/// step is exact for LQ up to rounding, the remaining steps polish it).
pub fn brute_force_oracle(problem: &ControlProblem) -> Result<TripleProcess> {
    let lat = problem.lattice();
    let dim = problem.dynamics.dim();
    if lat.mode() == LatticeMode::Tree && lat.steps() > ORACLE_TREE_CAP {
        return Err(Error::Oracle(format!(
            "tree depth {} exceeds the oracle cap N <= {ORACLE_TREE_CAP}",
            lat.steps()
        )));
    }
    if dim > ORACLE_DIM_CAP {
        return Err(Error::Oracle(format!(
            "state dimension {dim} exceeds the oracle cap {ORACLE_DIM_CAP}"
        )));
    }
    let layout = Layout::new(lat, dim);
    if layout.total > ORACLE_UNKNOWN_CAP {
        return Err(Error::Oracle(format!(
            "{} unknowns exceed the oracle cap {ORACLE_UNKNOWN_CAP}",
            layout.total
        )));
    }
    let f = |x: &DVector<f64>| oracle_residual(problem, &layout.unpack(problem, x));
    let mut x = DVector::zeros(layout.total);
    let mut fx = f(&x)?;
    check_dim("oracle equations", layout.total, fx.len())?;
    for _ in 0..30 {
        let scale = 1.0 + x.amax();
        if fx.amax() <= 1e-14 * scale {
            return Ok(layout.unpack(problem, &x));
        }
        let mut jac = DMatrix::zeros(layout.total, layout.total);
        for c in 0..layout.total {
            let h = 1e-6 * x[c].abs().max(1.0);
            let mut xp = x.clone();
            xp[c] += h;
            jac.set_column(c, &((f(&xp)? - &fx) / h));
        }
        let step = jac
            .lu()
            .solve(&(-&fx))
            .ok_or_else(|| Error::Oracle("singular Jacobian".into()))?;
        x += &step;
        let next = f(&x)?;
        if step.amax() <= 4.0 * f64::EPSILON * (1.0 + x.amax()) {
            return Ok(layout.unpack(problem, &x));
        }
        fx = next;
    }
    if fx.amax() <= 1e-12 * (1.0 + x.amax()) {
        return Ok(layout.unpack(problem, &x));
    }
    Err(Error::Oracle(format!(
        "Newton did not converge, residual {:.3e}",
        fx.amax()
    )))
}
