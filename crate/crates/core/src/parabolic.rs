//! Finite-difference front-end for the Dirichlet backward stochastic
//! parabolic problem on `(0,1)` or `(0,1)²`.
//!
//! Mesh values live at the interior points `x_p = (p+1) h`, `h = 1/(n+1)`,
//! with zero boundary values eliminated. The pivot space `H` carries the
//! lumped mass `h^d I`, the space `V` the discrete `H¹₀` norm.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::ControlProblem;
use crate::error::{check_dim, Error, Result};
use crate::evolution::Dynamics;
use crate::gelfand::{EvolutionCoefficients, GelfandTriple, MatrixFamily, VectorFamily};
use crate::hamiltonian::{LqIntegrand, LqMinimizer};
use crate::lattice::{AdaptedProcess, BrownianLattice, LatticeMode};
use crate::report::{CheckRecord, Worst};

/// A scalar coefficient field `(t, W_t, x) -> value`.
pub type Field = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
/// The terminal datum `(W_T, x) -> ξ(x)`.
pub type TerminalField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

pub fn field(f: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Field {
    Arc::new(f)
}

pub fn constant(value: f64) -> Field {
    Arc::new(move |_, _, _| value)
}

/// Which arguments the coefficient fields actually read. Families that do
/// not depend on `W` are stored per time level instead of per node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Dependence {
    pub time: bool,
    pub noise: bool,
}

#[derive(Clone)]
pub struct ParabolicProblem {
    pub space_dim: usize,
    pub mesh_n: usize,
    /// Upper triangle of the diffusion matrix, row by row: `[a11]` in 1-D,
    /// `[a11, a12, a22]` in 2-D.
    pub a: Vec<Field>,
    pub b: Vec<Field>,
    pub c: Field,
    pub nu: Field,
    pub g: Field,
    pub xi: TerminalField,
    pub kappa: f64,
    pub bound_k: f64,
    pub dependence: Dependence,
}

impl fmt::Debug for ParabolicProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParabolicProblem")
            .field("space_dim", &self.space_dim)
            .field("mesh_n", &self.mesh_n)
            .field("kappa", &self.kappa)
            .field("bound_k", &self.bound_k)
            .field("dependence", &self.dependence)
            .finish_non_exhaustive()
    }
}

impl ParabolicProblem {
    /// Heat equation `a = ½ I`, `b = c = ν = g = 0` with `ξ(x) = Π sin(π x_k)`
    /// and `κ = K = 1`.
    pub fn heat(space_dim: usize, mesh_n: usize) -> Self {
        let a = if space_dim == 1 {
            vec![constant(0.5)]
        } else {
            vec![constant(0.5), constant(0.0), constant(0.5)]
        };
        Self {
            space_dim,
            mesh_n,
            a,
            b: (0..space_dim).map(|_| constant(0.0)).collect(),
            c: constant(0.0),
            nu: constant(0.0),
            g: constant(0.0),
            xi: Arc::new(|_, x: &[f64]| x.iter().map(|v| (std::f64::consts::PI * v).sin()).product()),
            kappa: 1.0,
            bound_k: 1.0,
            dependence: Dependence::default(),
        }
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.mesh_n as f64 + 1.0)
    }

    /// Number of interior mesh values.
    pub fn dim(&self) -> usize {
        self.mesh_n.pow(self.space_dim as u32)
    }

    /// Mass weight `h^d` of one mesh value.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.space_dim as i32)
    }

    pub fn point(&self, p: usize) -> Vec<f64> {
        let h = self.h();
        match self.space_dim {
            1 => vec![(p + 1) as f64 * h],
            _ => vec![(p % self.mesh_n + 1) as f64 * h, (p / self.mesh_n + 1) as f64 * h],
        }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|p| self.point(p)).collect()
    }

    pub fn check_shape(&self) -> Result<()> {
        if !(1..=2).contains(&self.space_dim) {
            return Err(Error::Input(format!("space dimension must be 1 or 2, got {}", self.space_dim)));
        }
        if self.mesh_n < 2 {
            return Err(Error::Input(format!("mesh needs at least 2 interior points per axis, got {}", self.mesh_n)));
        }
        check_dim("diffusion entries", self.space_dim * (self.space_dim + 1) / 2, self.a.len())?;
        check_dim("drift entries", self.space_dim, self.b.len())?;
        if !(self.kappa > 0.0 && self.bound_k >= self.kappa && self.bound_k.is_finite()) {
            return Err(Error::Input(format!(
                "need 0 < kappa <= K, got kappa = {}, K = {}",
                self.kappa, self.bound_k
            )));
        }
        Ok(())
    }

    fn a_entry(&self, t: f64, w: f64, x: &[f64], i: usize, j: usize) -> f64 {
        match (self.space_dim, i.min(j), i.max(j)) {
            (1, _, _) => (self.a[0])(t, w, x),
            (_, 0, 0) => (self.a[0])(t, w, x),
            (_, 0, 1) => (self.a[1])(t, w, x),
            _ => (self.a[2])(t, w, x),
        }
    }

    fn diffusion_matrix(&self, t: f64, w: f64, x: &[f64]) -> DMatrix<f64> {
        let d = self.space_dim;
        DMatrix::from_fn(d, d, |i, j| self.a_entry(t, w, x, i, j))
    }

    /// Index of the neighbour of `p` shifted by `offsets` (in mesh steps), or
    /// `None` when it lies on the boundary.
    fn neighbour(&self, p: usize, offsets: &[isize]) -> Option<usize> {
        let n = self.mesh_n as isize;
        let mut idx = 0isize;
        let mut stride = 1isize;
        let mut rest = p as isize;
        for off in offsets.iter().take(self.space_dim) {
            let coord = rest % n + off;
            rest /= n;
            if !(0..n).contains(&coord) {
                return None;
            }
            idx += coord * stride;
            stride *= n;
        }
        Some(idx as usize)
    }

    fn shift(&self, x: &[f64], axis: usize, by: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        y[axis] += by;
        y
    }

    fn unit(&self, axis: usize, by: isize) -> [isize; 2] {
        let mut o = [0isize; 2];
        o[axis] = by;
        o
    }

    /// Second-order part `∂_i(a^{ij} ∂_j ·)`: flux form for diagonal entries,
    /// nested centered differences for mixed ones.
    fn divergence_part(&self, t: f64, w: f64) -> DMatrix<f64> {
        let n = self.dim();
        let h = self.h();
        let mut m = DMatrix::zeros(n, n);
        for p in 0..n {
            let x = self.point(p);
            for axis in 0..self.space_dim {
                let right = self.a_entry(t, w, &self.shift(&x, axis, 0.5 * h), axis, axis);
                let left = self.a_entry(t, w, &self.shift(&x, axis, -0.5 * h), axis, axis);
                m[(p, p)] -= (right + left) / (h * h);
                if let Some(q) = self.neighbour(p, &self.unit(axis, 1)) {
                    m[(p, q)] += right / (h * h);
                }
                if let Some(q) = self.neighbour(p, &self.unit(axis, -1)) {
                    m[(p, q)] += left / (h * h);
                }
            }
            if self.space_dim == 2 {
                for (i, j) in [(0usize, 1usize), (1, 0)] {
                    for si in [1isize, -1] {
                        let coef = self.a_entry(t, w, &self.shift(&x, i, si as f64 * h), i, j);
                        for sj in [1isize, -1] {
                            let mut off = self.unit(i, si);
                            off[j] += sj;
                            if let Some(q) = self.neighbour(p, &off) {
                                m[(p, q)] += (si * sj) as f64 * coef / (4.0 * h * h);
                            }
                        }
                    }
                }
            }
        }
        m
    }

    /// Centered first-order part `b^i ∂_i ·`.
    fn drift_part(&self, t: f64, w: f64) -> DMatrix<f64> {
        let n = self.dim();
        let h = self.h();
        let mut m = DMatrix::zeros(n, n);
        for p in 0..n {
            let x = self.point(p);
            for axis in 0..self.space_dim {
                let b = (self.b[axis])(t, w, &x);
                if b == 0.0 {
                    continue;
                }
                if let Some(q) = self.neighbour(p, &self.unit(axis, 1)) {
                    m[(p, q)] += b / (2.0 * h);
                }
                if let Some(q) = self.neighbour(p, &self.unit(axis, -1)) {
                    m[(p, q)] -= b / (2.0 * h);
                }
            }
        }
        m
    }

    fn diagonal(&self, f: &Field, t: f64, w: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.values(f, t, w))
    }

    fn values(&self, f: &Field, t: f64, w: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|p| f(t, w, &self.point(p))))
    }

    /// `A = −[∂_i(a^{ij}∂_j) + b^i∂_i + c]` on mesh values.
    pub fn operator(&self, t: f64, w: f64) -> DMatrix<f64> {
        -(self.divergence_part(t, w) + self.drift_part(t, w) + self.diagonal(&self.c, t, w))
    }

    /// The continuum adjoint `−∂_i(a^{ij}∂_j) + b^i∂_i − (c − ∂_i b^i)`
    /// discretized with the same stencils. The solvers use the exact
    /// discrete adjoint instead; this is kept for comparison.
    pub fn continuum_adjoint(&self, t: f64, w: f64) -> DMatrix<f64> {
        let h = self.h();
        let div_b = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|p| {
                let x = self.point(p);
                (0..self.space_dim)
                    .map(|axis| {
                        ((self.b[axis])(t, w, &self.shift(&x, axis, h))
                            - (self.b[axis])(t, w, &self.shift(&x, axis, -h)))
                            / (2.0 * h)
                    })
                    .sum::<f64>()
            }),
        );
        let zero_order = self.values(&self.c, t, w) - div_b;
        -self.divergence_part(t, w) + self.drift_part(t, w) - DMatrix::from_diagonal(&zero_order)
    }

    pub fn noise_operator(&self, t: f64, w: f64) -> DMatrix<f64> {
        self.diagonal(&self.nu, t, w)
    }

    pub fn forcing(&self, t: f64, w: f64) -> DVector<f64> {
        self.values(&self.g, t, w)
    }

    pub fn terminal(&self, w: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|p| (self.xi)(w, &self.point(p))))
    }

    /// Discrete Dirichlet Laplacian with the sign flipped (positive definite).
    pub fn stiffness(&self) -> DMatrix<f64> {
        let n = self.dim();
        let h2 = self.h() * self.h();
        let mut m = DMatrix::zeros(n, n);
        for p in 0..n {
            for axis in 0..self.space_dim {
                m[(p, p)] += 2.0 / h2;
                for s in [1isize, -1] {
                    if let Some(q) = self.neighbour(p, &self.unit(axis, s)) {
                        m[(p, q)] -= 1.0 / h2;
                    }
                }
            }
        }
        m
    }

    pub fn triple(&self) -> Result<GelfandTriple> {
        let n = self.dim();
        let vol = self.cell_volume();
        let mass = DMatrix::identity(n, n) * vol;
        let norm_v = &mass + self.stiffness() * vol;
        GelfandTriple::new(mass, norm_v)
    }

    /// Sample points for coefficient surveys: mesh points and the half points
    /// at which the flux stencil reads the diffusion.
    fn survey_points(&self) -> Vec<Vec<f64>> {
        let h = self.h();
        let mut out = Vec::new();
        for x in self.points() {
            for axis in 0..self.space_dim {
                out.push(self.shift(&x, axis, -0.5 * h));
            }
            out.push(x);
        }
        for x in self.points() {
            for axis in 0..self.space_dim {
                let y = self.shift(&x, axis, 0.5 * h);
                if y[axis] > 1.0 - 0.75 * h {
                    out.push(y);
                }
            }
        }
        out
    }
}

const SURVEY_NODES_PER_LEVEL: usize = 32;

/// Extremes of the coefficients over the lattice and the survey points.
#[derive(Debug, Clone)]
pub(crate) struct CoefficientSurvey {
    pub min_eig: Worst,
    pub max_eig: Worst,
    pub max_b: Worst,
    pub max_c: Worst,
    pub max_nu: Worst,
}

pub(crate) fn survey(problem: &ParabolicProblem, lattice: &BrownianLattice) -> CoefficientSurvey {
    let mut s = CoefficientSurvey {
        min_eig: Worst::min(),
        max_eig: Worst::max(),
        max_b: Worst::max(),
        max_c: Worst::max(),
        max_nu: Worst::max(),
    };
    let points = problem.survey_points();
    for i in 0..=lattice.steps() {
        let t = lattice.grid().time(i);
        let count = lattice.node_count(i);
        let stride = count.div_ceil(SURVEY_NODES_PER_LEVEL).max(1);
        for j in (0..count).step_by(stride) {
            let w = lattice.w(i, j);
            for x in &points {
                let here = || format!("t = {t:.6}, node {j}, x = {x:?}");
                let two_a = problem.diffusion_matrix(t, w, x) * 2.0;
                let eig = two_a.symmetric_eigenvalues();
                let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
                let asym = (0..problem.space_dim)
                    .flat_map(|r| (0..problem.space_dim).map(move |c| (r, c)))
                    .map(|(r, c)| (two_a[(r, c)] - two_a[(c, r)]).abs())
                    .fold(0.0, f64::max);
                let lo = if asym > 0.0 || !lo.is_finite() { f64::NAN } else { lo };
                s.min_eig.lower(lo, here);
                s.max_eig.raise(hi, here);
                let b = problem.b.iter().map(|f| f(t, w, x).powi(2)).sum::<f64>().sqrt();
                s.max_b.raise(b, here);
                s.max_c.raise((problem.c)(t, w, x).abs(), here);
                s.max_nu.raise((problem.nu)(t, w, x).abs(), here);
            }
        }
    }
    s
}

/// Super-parabolicity `κ I ⪯ 2a ⪯ K I` and the bound `K` on the lower-order
/// coefficients, sampled over the lattice and the mesh.
pub fn parabolic_checks(problem: &ParabolicProblem, lattice: &BrownianLattice) -> Vec<CheckRecord> {
    let s = survey(problem, lattice);
    let k = problem.bound_k;
    let lower = s.min_eig.value - problem.kappa;
    let upper = k - s.max_eig.value;
    let sp_margin = lower.min(upper);
    let sp_witness = if lower <= upper { s.min_eig.witness.clone() } else { s.max_eig.witness.clone() };
    let super_parabolic = CheckRecord::new("super-parabolicity", sp_margin >= 0.0, sp_margin)
        .with_detail(format!(
            "eigenvalues of 2a in [{:.6e}, {:.6e}], required [{}, {}]",
            s.min_eig.value, s.max_eig.value, problem.kappa, k
        ));
    let super_parabolic = if sp_margin >= 0.0 {
        super_parabolic
    } else {
        super_parabolic.with_witness(sp_witness.map(|w| format!("2a leaves [kappa, K] at {w}")))
    };
    let mut bound = Worst::min();
    for (name, w) in [("b", &s.max_b), ("c", &s.max_c), ("nu", &s.max_nu)] {
        bound.lower(k - w.value, || format!("|{name}| = {:.6e} at {}", w.value, w.witness.clone().unwrap_or_default()));
    }
    let ok = bound.value >= 0.0;
    let bounds = CheckRecord::new("coefficient-bounds", ok, bound.value).with_witness(if ok { None } else { bound.witness });
    vec![super_parabolic, bounds]
}

fn level_time(lattice: &BrownianLattice) -> impl Fn(usize) -> f64 + Send + Sync + 'static {
    let grid = *lattice.grid();
    move |i| grid.time(i)
}

fn matrix_family(
    dep: Dependence,
    lattice: &BrownianLattice,
    problem: &ParabolicProblem,
    build: fn(&ParabolicProblem, f64, f64) -> DMatrix<f64>,
) -> MatrixFamily {
    if dep.noise {
        let p = problem.clone();
        let time = level_time(lattice);
        MatrixFamily::random(move |i, w| build(&p, time(i), w))
    } else if dep.time {
        let time = level_time(lattice);
        MatrixFamily::PerTime(Arc::new((0..=lattice.steps()).map(|i| build(problem, time(i), 0.0)).collect()))
    } else {
        MatrixFamily::Constant(build(problem, 0.0, 0.0))
    }
}

/// Builds the control problem. Fails if super-parabolicity or the
/// coefficient bound does not hold at the sampled points.
pub fn assemble(problem: &ParabolicProblem, lattice: BrownianLattice) -> Result<ControlProblem> {
    problem.check_shape()?;
    if problem.space_dim == 2 && lattice.mode() == LatticeMode::Tree {
        return Err(Error::Input("2-D parabolic problems run in deterministic mode only".into()));
    }
    let checks = parabolic_checks(problem, &lattice);
    if let Some(bad) = checks.iter().find(|c| c.failed()) {
        return Err(Error::Validation(format!(
            "{}: {}",
            bad.name,
            bad.witness.clone().unwrap_or_else(|| format!("margin {:.6e}", bad.margin))
        )));
    }
    let s = survey(problem, &lattice);
    let lambda = s.max_c.value + s.max_b.value.powi(2) / (2.0 * problem.kappa) + 1.0;

    let dep = problem.dependence;
    let n = problem.dim();
    let a = matrix_family(dep, &lattice, problem, ParabolicProblem::operator);
    let b = matrix_family(dep, &lattice, problem, ParabolicProblem::noise_operator);
    let g = if dep.noise {
        let p = problem.clone();
        let time = level_time(&lattice);
        VectorFamily::random(move |i, w| p.forcing(time(i), w))
    } else if dep.time {
        let time = level_time(&lattice);
        VectorFamily::PerTime(Arc::new((0..=lattice.steps()).map(|i| problem.forcing(time(i), 0.0)).collect()))
    } else {
        VectorFamily::Constant(problem.forcing(0.0, 0.0))
    };
    let xi = if dep.noise {
        let p = problem.clone();
        VectorFamily::random(move |_, w| p.terminal(w))
    } else {
        VectorFamily::Constant(problem.terminal(0.0))
    };
    let triple = problem.triple()?;
    let mass = triple.mass_h().clone();
    let coeffs = EvolutionCoefficients::new(a, b, MatrixFamily::Constant(DMatrix::identity(n, n)), g, xi)?
        .with_control_mass(mass.clone())?
        .with_lambda(lambda)
        .with_bounds(Some(problem.bound_k), None);
    let eye = DMatrix::identity(n, n);
    let integrand = LqIntegrand::new(&triple, &mass, eye.clone(), eye.clone(), eye.clone(), eye)?;
    let minimizer = LqMinimizer::new(&integrand);
    let dynamics = Dynamics::new(triple, coeffs, lattice)?;
    Ok(ControlProblem::new(dynamics, Arc::new(integrand), Arc::new(minimizer)).with_pre_checks(checks))
}

/// Largest rate residual of the weak formulation
/// `(y_{i+1} − y_i, φ)_H = dt [⟨A y_i, φ⟩ + (B z_i + D u_i + G_i, φ)_H] + (z_i, φ)_H ΔW`
/// over `count` random test vectors `φ` (combinations of mesh hat functions,
/// normalized in `H`), divided by `dt`. The terminal condition is tested
/// as `(y_N − ξ, φ)_H`.
pub fn weak_solution_residual(
    problem: &ControlProblem,
    y: &AdaptedProcess,
    z: &AdaptedProcess,
    u: &AdaptedProcess,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = problem.dynamics.dim();
    let tests: Vec<DVector<f64>> = (0..count.max(1))
        .map(|_| {
            let phi = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let norm = problem.triple().norm_h_sq(&phi).sqrt();
            phi / norm
        })
        .collect();
    weak_residual_with(problem, y, z, u, &tests)
}

/// [`weak_solution_residual`] against caller-supplied test vectors.
pub fn weak_residual_with(
    problem: &ControlProblem,
    y: &AdaptedProcess,
    z: &AdaptedProcess,
    u: &AdaptedProcess,
    tests: &[DVector<f64>],
) -> Result<f64> {
    let dynamics = &problem.dynamics;
    let lat = problem.lattice();
    let n = lat.steps();
    let dt = lat.dt();
    let dim = dynamics.dim();
    check_dim("state process", dim, y.dim())?;
    check_dim("martingale process", dim, z.dim())?;
    check_dim("control process", dynamics.control_dim(), u.dim())?;
    for phi in tests {
        check_dim("test function", dim, phi.len())?;
    }
    let mass = problem.triple().mass_h();
    let mass_tests: Vec<DVector<f64>> = tests.iter().map(|phi| mass * phi).collect();
    let mut worst: f64 = 0.0;
    for j in 0..lat.node_count(n) {
        let diff = y.get(n, j) - dynamics.xi(j);
        for mphi in &mass_tests {
            worst = worst.max(diff.dot(mphi).abs());
        }
    }
    for i in 0..n {
        let next = y.level(i + 1);
        for j in 0..lat.node_count(i) {
            let (yi, zi) = (y.get(i, j), z.get(i, j));
            let drift = &*dynamics.a(i, j) * yi
                + &*dynamics.b(i, j) * zi
                + dynamics.state_forcing(i, j, Some(u.get(i, j)), None);
            for c in lat.children(j) {
                let r = &next[c] - yi - &drift * dt - zi * lat.increment(c);
                for mphi in &mass_tests {
                    worst = worst.max(r.dot(mphi).abs() / dt);
                }
            }
        }
    }
    Ok(worst)
}

/// Separation-of-variables value `e^{−π² T / 2} sin(π x)` of the 1-D heat
/// problem at time zero, sampled at the interior mesh points.
pub fn heat_decay_reference(mesh_n: usize, horizon: f64) -> DVector<f64> {
    let h = 1.0 / (mesh_n as f64 + 1.0);
    let pi = std::f64::consts::PI;
    let amp = (-pi * pi * horizon / 2.0).exp();
    DVector::from_fn(mesh_n, |p, _| amp * (pi * (p + 1) as f64 * h).sin())
}

/// Relative discrete `L²` error; the cell volume cancels.
pub fn relative_l2_error(approx: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (approx - reference).norm() / reference.norm()
}

/// `log(e_l / e_{l+1}) / log(h_l / h_{l+1})` for consecutive levels.
pub fn empirical_orders(errors: &[f64], widths: &[f64]) -> Vec<f64> {
    errors
        .windows(2)
        .zip(widths.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{solve_bsee, BseeInput};
    use crate::gelfand::certify_coercivity;
    use crate::lattice::TimeGrid;

    fn det(t: f64, n: usize) -> BrownianLattice {
        BrownianLattice::deterministic(TimeGrid::new(t, n).unwrap()).unwrap()
    }

    #[test]
    fn heat_stencil_matches_hand_assembly() {
        let p = ParabolicProblem::heat(1, 3);
        assert_eq!(p.h(), 0.25);
        let a = p.operator(0.0, 0.0);
        // −½ Δ_h with h = ¼: diagonal 16, off-diagonal −8.
        let expect = DMatrix::from_row_slice(3, 3, &[16.0, -8.0, 0.0, -8.0, 16.0, -8.0, 0.0, -8.0, 16.0]);
        assert!((&a - &expect).amax() < 1e-12, "{a}");
        assert!((&a - a.transpose()).amax() == 0.0);
        let sums: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
        assert_eq!(sums, vec![8.0, 0.0, 8.0]);
    }

    #[test]
    fn constant_coefficient_2d_stencil() {
        let mut p = ParabolicProblem::heat(2, 3);
        p.a = vec![constant(1.0), constant(0.25), constant(1.0)];
        let a = p.operator(0.0, 0.0);
        let h2 = p.h() * p.h();
        // Centre point (1,1) = index 4.
        assert!((a[(4, 4)] - 4.0 / h2).abs() < 1e-9);
        assert!((a[(4, 3)] + 1.0 / h2).abs() < 1e-9);
        assert!((a[(4, 1)] + 1.0 / h2).abs() < 1e-9);
        // Mixed term 2 a12 ∂_xy: corner (2,2) = index 8 gets −2·a12/(4h²).
        assert!((a[(4, 8)] + 2.0 * 0.25 / (4.0 * h2)).abs() < 1e-9);
        assert!((a[(4, 6)] - 2.0 * 0.25 / (4.0 * h2)).abs() < 1e-9);
    }

    #[test]
    fn self_adjoint_without_lower_order_terms() {
        let mut p = ParabolicProblem::heat(1, 9);
        p.a = vec![field(|_, _, x| 0.6 + 0.3 * x[0])];
        p.bound_k = 2.0;
        let a = p.operator(0.0, 0.0);
        assert!((&a - p.continuum_adjoint(0.0, 0.0)).amax() < 1e-12);
        assert!((&a - a.transpose()).amax() < 1e-12);
    }

    #[test]
    fn continuum_adjoint_is_consistent_with_transpose_on_smooth_functions() {
        let mut p = ParabolicProblem::heat(1, 63);
        p.b = vec![field(|_, _, x| x[0])];
        p.c = constant(0.5);
        let a = p.operator(0.0, 0.0);
        let phi = DVector::from_iterator(p.dim(), p.points().iter().map(|x| (std::f64::consts::PI * x[0]).sin()));
        let diff = (a.transpose() * &phi - p.continuum_adjoint(0.0, 0.0) * &phi).amax();
        assert!(diff < 1e-2, "{diff}");
    }

    #[test]
    fn super_parabolicity_examples() {
        let lat = det(1.0, 4);
        let p = ParabolicProblem::heat(1, 5);
        let checks = parabolic_checks(&p, &lat);
        assert!(checks.iter().all(|c| c.passed()), "{checks:?}");
        assert_eq!(checks[0].margin, 0.0);

        let mut bad = p.clone();
        bad.a = vec![constant(0.1)];
        bad.kappa = 0.3;
        let checks = parabolic_checks(&bad, &lat);
        assert!(checks[0].failed());
        assert!(checks[0].witness.as_deref().unwrap().contains("x ="));
        assert!(matches!(assemble(&bad, lat), Err(Error::Validation(_))));
    }

    #[test]
    fn shape_errors() {
        let lat = det(1.0, 4);
        assert!(assemble(&ParabolicProblem::heat(1, 1), lat.clone()).is_err());
        let tree = BrownianLattice::tree(TimeGrid::new(1.0, 2).unwrap()).unwrap();
        assert!(assemble(&ParabolicProblem::heat(2, 3), tree).is_err());
    }

    #[test]
    fn assembled_operator_is_coercive() {
        let mut p = ParabolicProblem::heat(1, 15);
        p.a = vec![field(|t, _, x| 0.5 + 0.2 * (x[0] + t).sin().abs())];
        p.b = vec![constant(0.8)];
        p.c = constant(-0.7);
        p.bound_k = 2.0;
        p.kappa = 1.0;
        p.dependence.time = true;
        let problem = assemble(&p, det(1.0, 4)).unwrap();
        let lambda = problem.dynamics.coeffs.lambda;
        assert!((lambda - (0.7 + 0.64 / 2.0 + 1.0)).abs() < 1e-12);
        for i in 0..4 {
            let a = problem.dynamics.a(i, 0).into_owned();
            let alpha = certify_coercivity(&[a], problem.triple(), lambda).unwrap();
            assert!(alpha > 0.0);
        }
    }

    #[test]
    fn heat_reference_examples() {
        let r = heat_decay_reference(3, 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r[0] - s).abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        let r = heat_decay_reference(1, 0.1);
        assert!((r[0] - (-std::f64::consts::PI.powi(2) * 0.05).exp()).abs() < 1e-15);
        assert!((r[0] - 0.6105).abs() < 1e-4);
    }

    #[test]
    fn weak_residual_small_for_solver_output_and_sensitive_to_perturbations() {
        let p = ParabolicProblem::heat(1, 15);
        let problem = assemble(&p, det(0.1, 64)).unwrap();
        let (y, z) = solve_bsee(&problem.dynamics, BseeInput::default()).unwrap();
        let u = AdaptedProcess::zeros(problem.lattice(), 15, 64);
        let r = weak_solution_residual(&problem, &y, &z, &u, 8, 1).unwrap();
        assert!(r < 1e-8, "{r}");

        let mut bumped = y.clone();
        let mut v = bumped.get(10, 0).clone();
        v[2] += 1e-3;
        bumped.set(10, 0, v);
        let dt = problem.lattice().dt();
        let r = weak_solution_residual(&problem, &bumped, &z, &u, 8, 1).unwrap();
        assert!(r > 1e-4 / dt && r < 1e-1 / dt, "{r}");

        // Test vector supported far from mesh point 2: unaffected.
        let mut phi = DVector::zeros(15);
        phi[10] = 1.0;
        phi[12] = -0.5;
        let far = weak_residual_with(&problem, &bumped, &z, &u, &[phi.clone()]).unwrap();
        let base = weak_residual_with(&problem, &y, &z, &u, &[phi]).unwrap();
        assert!((far - base).abs() < 1e-12);
    }

    #[test]
    fn weak_residual_flags_random_processes() {
        let p = ParabolicProblem::heat(1, 7);
        let problem = assemble(&p, det(0.1, 16)).unwrap();
        let lat = problem.lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let y = AdaptedProcess::random(lat, 7, 17, 1.0, &mut rng);
            let z = AdaptedProcess::zeros(lat, 7, 16);
            let u = AdaptedProcess::zeros(lat, 7, 16);
            let weak = weak_solution_residual(&problem, &y, &z, &u, 4, 0).unwrap();
            let forcing = AdaptedProcess::zeros(lat, 7, 16);
            let strong = crate::evolution::bsee_residual(&problem.dynamics, &y, &z, &forcing);
            assert!(weak > 1e-3 && strong > 1e-3);
        }
    }

    #[test]
    fn heat_decay_is_second_order_in_space() {
        let mut errors = Vec::new();
        let mut widths = Vec::new();
        for mesh_n in [8, 16, 32] {
            let p = ParabolicProblem::heat(1, mesh_n);
            let problem = assemble(&p, det(0.1, 4096)).unwrap();
            let (y, _) = solve_bsee(&problem.dynamics, BseeInput::default()).unwrap();
            errors.push(relative_l2_error(y.get(0, 0), &heat_decay_reference(mesh_n, 0.1)));
            widths.push(p.h());
        }
        for order in empirical_orders(&errors, &widths) {
            assert!((order - 2.0).abs() < 0.3, "{errors:?}");
        }
    }
}
