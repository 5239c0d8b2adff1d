//! Integrands, the Hamiltonian and the minimizer map γ, plus sampled
//! validators for the standing assumptions on a [`ControlProblem`].
//!
//! Gradients are Riesz representatives: `grad_y` and `grad_z` live in `H`
//! (paired with `mass_h`), `grad_u` lives in `U` (paired with `mass_u`).

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::control::ControlProblem;
use crate::evolution::Dynamics;
use crate::error::{check_dim, Error, Result};
use crate::gelfand::{
    adjoint_between, certify_coercivity, generalized_eigen_range, operator_bound_v, spectral_norm,
    symmetric_part, GelfandTriple,
};
use crate::report::{CheckRecord, Worst};

/// Absolute slack for sampled inequalities.
pub const VALIDATION_TOL: f64 = 1e-8;
/// Slack for the γ monotonicity and Lipschitz checks.
pub const GAMMA_TOL: f64 = 1e-10;
const FD_REL_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const PROBE_AMPLITUDE: f64 = 2.0;

/// Running cost `l(t, y, z, u)` and terminal cost `h(y)`.
pub trait Integrand: Send + Sync + Debug {
    fn running(&self, level: usize, w: f64, y: &DVector<f64>, z: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn grad_y(&self, level: usize, w: f64, y: &DVector<f64>, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_z(&self, level: usize, w: f64, y: &DVector<f64>, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_u(&self, level: usize, w: f64, y: &DVector<f64>, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn terminal(&self, y: &DVector<f64>) -> f64;
    fn terminal_grad(&self, y: &DVector<f64>) -> DVector<f64>;
    /// The constant `C` of the monotonicity inequalities.
    fn monotonicity_c(&self) -> f64;
    /// Constant bounding growth of `l`, `h` and their gradients.
    fn growth_c(&self) -> f64;
    /// Model-specific checks (e.g. positivity of LQ weights).
    fn structural_checks(&self) -> Vec<CheckRecord> {
        Vec::new()
    }
}

/// The map γ with `u = γ(D*k)` minimizing the Hamiltonian.
pub trait Minimizer: Send + Sync + Debug {
    fn gamma(&self, level: usize, node: usize, v: &DVector<f64>) -> Result<DVector<f64>>;
    fn lipschitz_c(&self) -> f64;
}

/// `−½ N⁻¹ v` for a symmetric positive-definite `N`.
pub fn lq_gamma(level: usize, node: usize, v: &DVector<f64>, n: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim("gamma input", n.nrows(), v.len())?;
    let chol = symmetric_part(n).cholesky().ok_or_else(|| {
        Error::Validation(format!(
            "control weight N is not positive-definite at time index {level}, node {node}"
        ))
    })?;
    Ok(chol.solve(v) * -0.5)
}

fn bilinear(m: &DMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (m * y).dot(x)
}

/// Linear-quadratic integrand
/// `l = (M y, y)_H + (Q z, z)_H + (N u, u)_U`, `h = (h̄ y, y)_H`,
/// optionally plus `c Σ_j log(1 + y_j²)`.
#[derive(Debug, Clone)]
pub struct LqIntegrand {
    m: DMatrix<f64>,
    q: DMatrix<f64>,
    n: DMatrix<f64>,
    h: DMatrix<f64>,
    mass_h: DMatrix<f64>,
    mass_u: DMatrix<f64>,
    mass_h_inv: DMatrix<f64>,
    norm_v: DMatrix<f64>,
    perturbation: f64,
    monotonicity_override: Option<f64>,
}

impl LqIntegrand {
    /// Weights are replaced by their self-adjoint parts, which leaves the
    /// quadratic forms unchanged.
    pub fn new(
        triple: &GelfandTriple,
        mass_u: &DMatrix<f64>,
        m: DMatrix<f64>,
        q: DMatrix<f64>,
        n: DMatrix<f64>,
        h: DMatrix<f64>,
    ) -> Result<Self> {
        let dim = triple.dim();
        for (name, w) in [("M", &m), ("Q", &q), ("h", &h)] {
            check_dim(name, dim, w.nrows())?;
            check_dim("LQ weight columns", dim, w.ncols())?;
        }
        check_dim("N", mass_u.nrows(), n.nrows())?;
        check_dim("N columns", mass_u.nrows(), n.ncols())?;
        let mh = triple.mass_h().clone();
        let self_adjoint = |w: &DMatrix<f64>, mass: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            Ok((w + adjoint_between(w, mass, mass)?) * 0.5)
        };
        let mass_h_inv = mh
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotSpd("mass_h".into()))?;
        Ok(Self {
            m: self_adjoint(&m, &mh)?,
            q: self_adjoint(&q, &mh)?,
            h: self_adjoint(&h, &mh)?,
            n: self_adjoint(&n, mass_u)?,
            mass_h: mh,
            mass_u: mass_u.clone(),
            mass_h_inv,
            norm_v: triple.norm_v().clone(),
            perturbation: 0.0,
            monotonicity_override: None,
        })
    }

    /// All four weights equal to `δ·I` on the identity triple.
    pub fn scalar_identity(dim: usize, delta: f64) -> Result<Self> {
        let eye = DMatrix::identity(dim, dim) * delta;
        Self::new(
            &GelfandTriple::identity(dim),
            &DMatrix::identity(dim, dim),
            eye.clone(),
            eye.clone(),
            eye.clone(),
            eye,
        )
    }

    pub fn with_perturbation(mut self, c: f64) -> Self {
        self.perturbation = c;
        self
    }

    pub fn with_monotonicity_c(mut self, c: f64) -> Self {
        self.monotonicity_override = Some(c);
        self
    }

    pub fn control_weight(&self) -> &DMatrix<f64> {
        &self.n
    }

    fn perturbation_value(&self, y: &DVector<f64>) -> f64 {
        if self.perturbation == 0.0 {
            return 0.0;
        }
        self.perturbation * y.iter().map(|v| v.mul_add(*v, 1.0).ln()).sum::<f64>()
    }

    fn perturbation_grad(&self, y: &DVector<f64>) -> DVector<f64> {
        let euclid = y.map(|v| 2.0 * v / v.mul_add(v, 1.0)) * self.perturbation;
        &self.mass_h_inv * euclid
    }

    /// Smallest eigenvalue of the pencil `(sym(mass·w), weight)`.
    fn pencil_min(mass: &DMatrix<f64>, w: &DMatrix<f64>, weight: &DMatrix<f64>) -> f64 {
        generalized_eigen_range(&symmetric_part(&(mass * w)), weight)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    }

    /// Largest `‖W x‖_range / ‖x‖_domain`.
    fn op_norm(w: &DMatrix<f64>, range: &DMatrix<f64>, domain: &DMatrix<f64>) -> f64 {
        generalized_eigen_range(&(w.transpose() * range * w), domain)
            .map(|r| r.1.max(0.0).sqrt())
            .unwrap_or(f64::NAN)
    }
}

impl Integrand for LqIntegrand {
    fn running(&self, _: usize, _: f64, y: &DVector<f64>, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
        bilinear(&(&self.mass_h * &self.m), y, y)
            + bilinear(&(&self.mass_h * &self.q), z, z)
            + bilinear(&(&self.mass_u * &self.n), u, u)
            + self.perturbation_value(y)
    }

    fn grad_y(&self, _: usize, _: f64, y: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        let g = &self.m * y * 2.0;
        if self.perturbation == 0.0 {
            g
        } else {
            g + self.perturbation_grad(y)
        }
    }

    fn grad_z(&self, _: usize, _: f64, _: &DVector<f64>, z: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        &self.q * z * 2.0
    }

    fn grad_u(&self, _: usize, _: f64, _: &DVector<f64>, _: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.n * u * 2.0
    }

    fn terminal(&self, y: &DVector<f64>) -> f64 {
        bilinear(&(&self.mass_h * &self.h), y, y)
    }

    fn terminal_grad(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.h * y * 2.0
    }

    fn monotonicity_c(&self) -> f64 {
        if let Some(c) = self.monotonicity_override {
            return c;
        }
        let cy = 2.0 * Self::pencil_min(&self.mass_h, &self.m, &self.norm_v);
        let cz = 2.0 * Self::pencil_min(&self.mass_h, &self.q, &self.mass_h);
        let ch = 2.0 * Self::pencil_min(&self.mass_h, &self.h, &self.norm_v);
        // log(1 + s²) has second derivative ≥ −1/4.
        let euclid_to_v = Self::pencil_min(&DMatrix::identity(self.m.nrows(), self.m.nrows()), &self.norm_v, &DMatrix::identity(self.m.nrows(), self.m.nrows()));
        let loss = self.perturbation.abs() * 0.25 / euclid_to_v;
        (cy - loss).min(cz).min(ch)
    }

    fn growth_c(&self) -> f64 {
        let cm = Self::op_norm(&self.m, &self.mass_h, &self.norm_v);
        let cq = Self::op_norm(&self.q, &self.mass_h, &self.mass_h);
        let cn = Self::op_norm(&self.n, &self.mass_u, &self.mass_u);
        let ch = Self::op_norm(&self.h, &self.mass_h, &self.norm_v);
        let eye = DMatrix::identity(self.m.nrows(), self.m.nrows());
        let v_min = Self::pencil_min(&eye, &self.norm_v, &eye);
        let pert = 2.0 * self.perturbation.abs() * (spectral_norm(&self.mass_h_inv) / v_min).sqrt()
            + self.perturbation.abs() / v_min;
        2.0 * cm.max(cq).max(cn).max(ch) + pert
    }

    fn structural_checks(&self) -> Vec<CheckRecord> {
        let weights = [
            ("M", &self.m, &self.mass_h),
            ("Q", &self.q, &self.mass_h),
            ("N", &self.n, &self.mass_u),
            ("h", &self.h, &self.mass_h),
        ];
        let mut worst = Worst::min();
        for (name, w, mass) in weights {
            let min = Self::pencil_min(mass, w, mass);
            worst.lower(min, || format!("weight {name} has eigenvalue {min:.6e}"));
        }
        let passed = worst.value > 0.0;
        vec![CheckRecord::new("lq-positivity", passed, worst.value).with_witness(if passed {
            None
        } else {
            worst.witness
        })]
    }
}

/// γ for the LQ integrand.
#[derive(Debug, Clone)]
pub struct LqMinimizer {
    n: DMatrix<f64>,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    mass_u: DMatrix<f64>,
}

impl LqMinimizer {
    pub fn new(integrand: &LqIntegrand) -> Self {
        let n = integrand.n.clone();
        let weighted = symmetric_part(&(&integrand.mass_u * &n));
        Self {
            factor: weighted.cholesky(),
            n,
            mass_u: integrand.mass_u.clone(),
        }
    }
}

impl Minimizer for LqMinimizer {
    fn gamma(&self, level: usize, node: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("gamma input", self.n.nrows(), v.len())?;
        let chol = self.factor.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "control weight N is not positive-definite at time index {level}, node {node}"
            ))
        })?;
        // N is U-self-adjoint, so N⁻¹ v = (M_U N)⁻¹ M_U v.
        Ok(chol.solve(&(&self.mass_u * v)) * -0.5)
    }

    fn lipschitz_c(&self) -> f64 {
        match &self.factor {
            Some(chol) => 0.5 * spectral_norm(&chol.inverse()) * spectral_norm(&self.mass_u),
            None => f64::INFINITY,
        }
    }
}

/// `(B z + D u, k)_H + l(y, z, u)` at node `(level, node)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_value(
    problem: &ControlProblem,
    level: usize,
    node: usize,
    y: &DVector<f64>,
    z: &DVector<f64>,
    u: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<f64> {
    let dynamics = &problem.dynamics;
    check_dim("hamiltonian y", dynamics.dim(), y.len())?;
    check_dim("hamiltonian z", dynamics.dim(), z.len())?;
    check_dim("hamiltonian k", dynamics.dim(), k.len())?;
    check_dim("hamiltonian u", dynamics.control_dim(), u.len())?;
    let drive = &*dynamics.b(level, node) * z + &*dynamics.d(level, node) * u;
    let w = dynamics.w(level, node);
    Ok(dynamics.triple.inner_h_unchecked(&drive, k) + problem.integrand.running(level, w, y, z, u))
}

/// `D* k + l_u` at node `(level, node)`, as an element of `U`.
pub fn hamiltonian_grad_u(
    problem: &ControlProblem,
    level: usize,
    node: usize,
    y: &DVector<f64>,
    z: &DVector<f64>,
    u: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dynamics = &problem.dynamics;
    check_dim("hamiltonian k", dynamics.dim(), k.len())?;
    check_dim("hamiltonian u", dynamics.control_dim(), u.len())?;
    let w = dynamics.w(level, node);
    Ok(&*dynamics.adjoint_d(level, node) * k + problem.integrand.grad_u(level, w, y, z, u))
}

/// Outcome of [`validate_assumptions`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckRecord>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckRecord::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| c.failed())
    }
}

struct Sampler<'a> {
    problem: &'a ControlProblem,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn node(&mut self) -> (usize, usize) {
        let lat = self.problem.lattice();
        let i = self.rng.random_range(0..lat.steps());
        let j = self.rng.random_range(0..lat.node_count(i));
        (i, j)
    }

    fn vector(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.rng.random_range(-PROBE_AMPLITUDE..PROBE_AMPLITUDE))
    }
}

fn record(name: &str, worst: Worst, passed: bool) -> CheckRecord {
    CheckRecord::new(name, passed, worst.value).with_witness(if passed { None } else { worst.witness })
}

/// Runs every sampled assumption check with `probes` random samples drawn
/// from a generator seeded by `seed`. Failures become report entries.
pub fn validate_assumptions(problem: &ControlProblem, probes: usize, seed: u64) -> ValidationReport {
    let probes = probes.max(1);
    let mut s = Sampler {
        problem,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut checks = problem.pre_checks.clone();
    checks.push(check_bounded(problem, &mut s, probes));
    checks.extend(check_coercivity(problem, &mut s, probes));
    checks.extend(check_integrand(problem, &mut s, probes));
    checks.push(check_monotonicity(problem, &mut s, probes));
    checks.extend(check_gamma(problem, &mut s, probes));
    checks.extend(problem.integrand.structural_checks());
    ValidationReport { checks }
}

fn check_bounded(problem: &ControlProblem, s: &mut Sampler<'_>, probes: usize) -> CheckRecord {
    let dynamics = &problem.dynamics;
    let coeffs = &dynamics.coeffs;
    let mut worst = Worst::max();
    let mut finite = true;
    for _ in 0..probes {
        let (i, j) = s.node();
        for (name, op, bound) in [
            ("B", dynamics.b(i, j), coeffs.b_bound),
            ("D", dynamics.d(i, j), coeffs.d_bound),
        ] {
            let norm = spectral_norm(&op);
            if !norm.is_finite() {
                finite = false;
            }
            let excess = bound.map_or(0.0, |b| norm - b);
            worst.raise(excess, || format!("{name} at time index {i}, node {j} has norm {norm:.6e}"));
        }
    }
    let passed = finite && worst.value <= VALIDATION_TOL;
    record("bounded-coefficients", worst, passed)
}

fn check_coercivity(problem: &ControlProblem, s: &mut Sampler<'_>, probes: usize) -> Vec<CheckRecord> {
    let dynamics = &problem.dynamics;
    let lambda = dynamics.coeffs.lambda;
    let mut alpha = Worst::min();
    let mut bound = Worst::max();
    let nodes: Vec<(usize, usize)> = if dynamics.coeffs.a.is_deterministic() {
        (0..problem.lattice().steps()).map(|i| (i, 0)).take(probes.max(1)).collect()
    } else {
        (0..probes).map(|_| s.node()).collect()
    };
    for (i, j) in nodes {
        let a = dynamics.a(i, j).into_owned();
        let here = || format!("A at time index {i}, node {j}");
        match certify_coercivity(std::slice::from_ref(&a), &dynamics.triple, lambda) {
            Ok(v) => alpha.lower(v, here),
            Err(Error::Coercivity { alpha: v }) => alpha.lower(v, here),
            Err(e) => alpha.lower(f64::NAN, || format!("{}: {e}", here())),
        }
        match operator_bound_v(std::slice::from_ref(&a), &dynamics.triple) {
            Ok(v) => bound.raise(v, here),
            Err(e) => bound.raise(f64::NAN, || format!("{}: {e}", here())),
        }
    }
    let alpha_ok = alpha.value > 0.0;
    let bound_ok = bound.value.is_finite();
    vec![record("coercivity", alpha, alpha_ok), record("operator-bound", bound, bound_ok)]
}

fn check_integrand(problem: &ControlProblem, s: &mut Sampler<'_>, probes: usize) -> Vec<CheckRecord> {
    let l = problem.integrand.as_ref();
    let triple = &problem.dynamics.triple;
    let mass_u = &problem.dynamics.coeffs.mass_u;
    let n = problem.dynamics.dim();
    let m = problem.dynamics.control_dim();
    let growth = l.growth_c();
    let mut grad_err = Worst::max();
    let mut convex = Worst::max();
    let mut growth_excess = Worst::max();
    for p in 0..probes {
        let (i, j) = s.node();
        let w = problem.lattice().w(i, j);
        let (y, z, u) = (s.vector(n), s.vector(n), s.vector(m));
        let (dy, dz, du) = (s.vector(n), s.vector(n), s.vector(m));

        let at = |t: f64| l.running(i, w, &(&y + &dy * t), &(&z + &dz * t), &(&u + &du * t));
        let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let an = triple.inner_h_unchecked(&l.grad_y(i, w, &y, &z, &u), &dy)
            + triple.inner_h_unchecked(&l.grad_z(i, w, &y, &z, &u), &dz)
            + bilinear(mass_u, &l.grad_u(i, w, &y, &z, &u), &du);
        let err = (fd - an).abs() / an.abs().max(1.0);
        grad_err.raise(err, || format!("running cost probe {p} at time index {i}, node {j}: fd {fd:.9e} vs {an:.9e}"));

        let th = |t: f64| l.terminal(&(&y + &dy * t));
        let fd = (th(FD_STEP) - th(-FD_STEP)) / (2.0 * FD_STEP);
        let an = triple.inner_h_unchecked(&l.terminal_grad(&y), &dy);
        let err = (fd - an).abs() / an.abs().max(1.0);
        grad_err.raise(err, || format!("terminal cost probe {p}: fd {fd:.9e} vs {an:.9e}"));

        // Midpoint convexity along the probe segment [x, x + d].
        let (l0, l1, lm) = (at(0.0), at(1.0), at(0.5));
        let gap = lm - 0.5 * (l0 + l1);
        convex.raise(gap - 1e-12 * (l0.abs() + l1.abs()), || {
            format!("running cost probe {p} at time index {i}, node {j}: midpoint exceeds chord by {gap:.6e}")
        });
        let (h0, h1, hm) = (th(0.0), th(1.0), th(0.5));
        let gap = hm - 0.5 * (h0 + h1);
        convex.raise(gap - 1e-12 * (h0.abs() + h1.abs()), || {
            format!("terminal cost probe {p}: midpoint exceeds chord by {gap:.6e}")
        });

        let size = triple.norm_v_sq_unchecked(&y) + triple.norm_h_sq(&z) + bilinear(mass_u, &u, &u);
        let value = l.running(i, w, &y, &z, &u).abs();
        let grads = (triple.norm_h_sq(&l.grad_y(i, w, &y, &z, &u))
            + triple.norm_h_sq(&l.grad_z(i, w, &y, &z, &u))
            + bilinear(mass_u, &l.grad_u(i, w, &y, &z, &u), &l.grad_u(i, w, &y, &z, &u)))
        .sqrt();
        let excess = (value - growth * (1.0 + size)).max(grads - growth * (1.0 + size.sqrt()));
        growth_excess.raise(excess, || {
            format!("probe {p} at time index {i}, node {j}: |l| = {value:.6e}, |grad l| = {grads:.6e}")
        });
    }
    let grad_ok = grad_err.value <= FD_REL_TOL;
    let convex_ok = convex.value <= VALIDATION_TOL;
    let growth_ok = growth.is_finite() && growth_excess.value <= VALIDATION_TOL;
    vec![
        record("integrand-gradients", grad_err, grad_ok),
        record("integrand-convexity", convex, convex_ok),
        record("integrand-growth", growth_excess, growth_ok),
    ]
}

fn check_monotonicity(problem: &ControlProblem, s: &mut Sampler<'_>, probes: usize) -> CheckRecord {
    let l = problem.integrand.as_ref();
    let triple = &problem.dynamics.triple;
    let n = problem.dynamics.dim();
    let m = problem.dynamics.control_dim();
    let c = l.monotonicity_c();
    let mut ratio = Worst::min();
    let mut violation = Worst::max();
    for p in 0..probes {
        let (i, j) = s.node();
        let w = problem.lattice().w(i, j);
        let (y1, z1, y2, z2, u) = (s.vector(n), s.vector(n), s.vector(n), s.vector(n), s.vector(m));
        let (dy, dz) = (&y1 - &y2, &z1 - &z2);
        let lhs = triple.inner_h_unchecked(&(l.grad_y(i, w, &y1, &z1, &u) - l.grad_y(i, w, &y2, &z2, &u)), &dy)
            + triple.inner_h_unchecked(&(l.grad_z(i, w, &y1, &z1, &u) - l.grad_z(i, w, &y2, &z2, &u)), &dz);
        let size = triple.norm_v_sq_unchecked(&dy) + triple.norm_h_sq(&dz);
        let witness = || format!("running cost probe {p} at time index {i}, node {j}: y1 = {:?}, y2 = {:?}", y1.as_slice(), y2.as_slice());
        if size > 0.0 {
            ratio.lower(lhs / size, witness);
        }
        violation.raise(c * size - lhs, witness);

        let lhs = triple.inner_h_unchecked(&(l.terminal_grad(&y1) - l.terminal_grad(&y2)), &dy);
        let size = triple.norm_v_sq_unchecked(&dy);
        let witness = || format!("terminal cost probe {p}: y1 = {:?}, y2 = {:?}", y1.as_slice(), y2.as_slice());
        if size > 0.0 {
            ratio.lower(lhs / size, witness);
        }
        violation.raise(c * size - lhs, witness);
    }
    let passed = c > 0.0 && violation.value <= VALIDATION_TOL;
    let witness = if passed {
        None
    } else if c <= 0.0 {
        Some(format!(
            "monotonicity constant {c:.6e} is not positive; worst {}",
            ratio.witness.clone().unwrap_or_default()
        ))
    } else {
        violation.witness.clone()
    };
    CheckRecord::new("monotonicity", passed, ratio.value)
        .with_witness(witness)
        .with_detail(format!("C = {c:.6e}"))
}

/// Lipschitz constant of `k ↦ D γ(D* k)` from `V` to `H` given the constant
/// of `γ` on `U`: `lip · ‖D‖_{U→H} · ‖D*‖_{V→U}`.
fn composite_lipschitz(lip: f64, dynamics: &Dynamics, i: usize, j: usize) -> Result<f64> {
    let triple = &dynamics.triple;
    let mass_u = &dynamics.coeffs.mass_u;
    let d = dynamics.d(i, j);
    let d_star = dynamics.adjoint_d(i, j);
    let (_, d_sq) = generalized_eigen_range(&(d.transpose() * triple.mass_h() * &*d), mass_u)?;
    let (_, ds_sq) = generalized_eigen_range(&(d_star.transpose() * mass_u * &*d_star), triple.norm_v())?;
    Ok(lip * d_sq.max(0.0).sqrt() * ds_sq.max(0.0).sqrt())
}

fn check_gamma(problem: &ControlProblem, s: &mut Sampler<'_>, probes: usize) -> Vec<CheckRecord> {
    let dynamics = &problem.dynamics;
    let triple = &dynamics.triple;
    let n = dynamics.dim();
    let lip = problem.minimizer.lipschitz_c();
    let mut mono = Worst::max();
    let mut lipschitz = Worst::max();
    let mut minimum = Worst::max();
    let mut error: Option<String> = None;
    for p in 0..probes {
        let (i, j) = s.node();
        let (k1, k2) = (s.vector(n), s.vector(n));
        let map = |k: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
            let u = problem.minimizer.gamma(i, j, &(&*dynamics.adjoint_d(i, j) * k))?;
            Ok((&*dynamics.d(i, j) * &u, u))
        };
        let ((g1, u1), (g2, _)) = match (map(&k1), map(&k2)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                error.get_or_insert_with(|| format!("probe {p} at time index {i}, node {j}: {e}"));
                continue;
            }
        };
        let dk = &k1 - &k2;
        let dg = &g1 - &g2;
        let pairing = triple.inner_h_unchecked(&dg, &dk);
        mono.raise(pairing, || format!("probe {p} at time index {i}, node {j}: pairing {pairing:.6e}"));
        let composite = match composite_lipschitz(lip, dynamics, i, j) {
            Ok(c) => c,
            Err(e) => {
                error.get_or_insert_with(|| format!("probe {p} at time index {i}, node {j}: {e}"));
                continue;
            }
        };
        let excess = triple.norm_h_sq(&dg).sqrt() - composite * triple.norm_v_sq_unchecked(&dk).sqrt();
        lipschitz.raise(excess, || format!("probe {p} at time index {i}, node {j}: excess {excess:.6e}"));

        let (y, z) = (s.vector(n), s.vector(n));
        let base = hamiltonian_value(problem, i, j, &y, &z, &u1, &k1).unwrap_or(f64::NAN);
        let v = s.vector(u1.len()) * 0.5;
        let moved = hamiltonian_value(problem, i, j, &y, &z, &(&u1 + &v), &k1).unwrap_or(f64::NAN);
        let drop = base - moved;
        minimum.raise(drop - VALIDATION_TOL * base.abs().max(1.0), || {
            format!("probe {p} at time index {i}, node {j}: perturbing gamma lowers the Hamiltonian by {drop:.6e}")
        });
    }
    let fail_all = |name: &str, e: &str| CheckRecord::new(name, false, f64::NAN).with_witness(Some(e.to_string()));
    if let Some(e) = error {
        return vec![
            fail_all("gamma-monotone", &e),
            fail_all("gamma-lipschitz", &e),
            fail_all("gamma-minimizer", &e),
        ];
    }
    let mono_ok = mono.value <= GAMMA_TOL;
    let lip_ok = lip.is_finite() && lipschitz.value <= GAMMA_TOL;
    let min_ok = minimum.value <= 0.0;
    vec![
        record("gamma-monotone", mono, mono_ok),
        record("gamma-lipschitz", lipschitz, lip_ok),
        record("gamma-minimizer", minimum, min_ok),
    ]
}
