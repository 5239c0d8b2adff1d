//! Decoupled one-equation solvers on the lattice.
//!
//! State (backward) step, per node at level `i`:
//!
//! ```text
//! z_i = (y_up − y_down) / (2√dt)
//! (I + dt A_i) y_i = E_i[y_{i+1}] − dt (B_i z_i + D_i u_i + G_i + f0_i)
//! ```
//!
//! Adjoint (forward) step, per node at level `i`:
//!
//! ```text
//! (I + dt A*_i) κ_i = k_i − dt d_i
//! k_{i+1} = κ_i − (B*_i κ_i + e_i) ΔW
//! ```
//!
//! with drift load `d` and diffusion load `e`. The adjoint step is the exact
//! discrete transpose of the state step, so `κ_i = E_i[k_{i+1}]` is the
//! adjoint value that pairs with the control in the discrete Hamiltonian.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::control::ControlProblem;
use crate::error::{check_dim, Error, Result};
use crate::gelfand::{EvolutionCoefficients, GelfandTriple, MatrixFamily};
use crate::lattice::{AdaptedProcess, BrownianLattice, TripleProcess};

type Lu = LU<f64, Dyn, Dyn>;

#[derive(Debug, Clone)]
enum Factors {
    PerLevel(Vec<Lu>),
    PerNode(Vec<Vec<Lu>>),
}

impl Factors {
    fn build(family: &MatrixFamily, lattice: &BrownianLattice) -> Result<Self> {
        let dt = lattice.dt();
        let factor = |i: usize, j: usize, m: &DMatrix<f64>| -> Result<Lu> {
            let n = m.nrows();
            let lu = (DMatrix::identity(n, n) + m * dt).lu();
            if !lu.is_invertible() {
                return Err(Error::Singular {
                    level: i,
                    node: Some(j),
                });
            }
            Ok(lu)
        };
        match family {
            MatrixFamily::Constant(m) => Ok(Self::PerLevel(vec![factor(0, 0, m)?])),
            MatrixFamily::PerTime(_) => (0..lattice.steps())
                .map(|i| factor(i, 0, &family.at(i, 0.0)))
                .collect::<Result<_>>()
                .map(Self::PerLevel),
            MatrixFamily::Random(_) => (0..lattice.steps())
                .map(|i| {
                    (0..lattice.node_count(i))
                        .map(|j| factor(i, j, &family.at(i, lattice.w(i, j))))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()
                .map(Self::PerNode),
        }
    }

    fn get(&self, i: usize, j: usize) -> &Lu {
        match self {
            Self::PerLevel(v) => &v[i.min(v.len() - 1)],
            Self::PerNode(v) => &v[i][j],
        }
    }
}

/// Everything the one-equation solvers need: the triple, coefficients with
/// adjoints, the lattice, and cached factorizations of the implicit steps.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub triple: GelfandTriple,
    pub coeffs: EvolutionCoefficients,
    pub lattice: BrownianLattice,
    state_steps: Factors,
    adjoint_steps: Factors,
}

impl Dynamics {
    pub fn new(
        triple: GelfandTriple,
        coeffs: EvolutionCoefficients,
        lattice: BrownianLattice,
    ) -> Result<Self> {
        check_dim("coefficients vs triple", triple.dim(), coeffs.state_dim())?;
        let coeffs = if coeffs.has_adjoints() {
            coeffs
        } else {
            crate::gelfand::build_adjoints(&coeffs, &triple)?
        };
        let state_steps = Factors::build(&coeffs.a, &lattice)?;
        let adjoint_steps = Factors::build(coeffs.adjoint_a.as_ref().expect("built"), &lattice)?;
        Ok(Self {
            triple,
            coeffs,
            lattice,
            state_steps,
            adjoint_steps,
        })
    }

    pub fn dim(&self) -> usize {
        self.triple.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.coeffs.control_dim()
    }

    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.lattice.w(i, j)
    }

    pub fn a(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        self.coeffs.a.at(i, self.w(i, j))
    }

    pub fn adjoint_a(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        self.coeffs.adjoint_a.as_ref().expect("built").at(i, self.w(i, j))
    }

    pub fn b(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        self.coeffs.b.at(i, self.w(i, j))
    }

    pub fn adjoint_b(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        self.coeffs.adjoint_b.as_ref().expect("built").at(i, self.w(i, j))
    }

    pub fn d(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        self.coeffs.d.at(i, self.w(i, j))
    }

    pub fn adjoint_d(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        self.coeffs.adjoint_d.as_ref().expect("built").at(i, self.w(i, j))
    }

    pub fn g(&self, i: usize, j: usize) -> std::borrow::Cow<'_, DVector<f64>> {
        self.coeffs.g.at(i, self.w(i, j))
    }

    pub fn xi(&self, j: usize) -> DVector<f64> {
        let n = self.lattice.steps();
        self.coeffs.xi.at(n, self.w(n, j)).into_owned()
    }

    /// `D_i u + G_i + f0` at one node.
    pub fn state_forcing(
        &self,
        i: usize,
        j: usize,
        u: Option<&DVector<f64>>,
        f0: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        let mut f = self.g(i, j).into_owned();
        if let Some(u) = u {
            f += &*self.d(i, j) * u;
        }
        if let Some(f0) = f0 {
            f += f0;
        }
        f
    }
}

/// Inputs of the state equation beyond the coefficients.
#[derive(Debug, Clone, Copy, Default)]
pub struct BseeInput<'a> {
    pub control: Option<&'a AdaptedProcess>,
    pub extra_forcing: Option<&'a AdaptedProcess>,
}

/// Inputs of the adjoint equation.
pub struct SeeInput<'a> {
    pub initial: &'a dyn Fn(&DVector<f64>) -> DVector<f64>,
    pub drift: &'a AdaptedProcess,
    pub diffusion: &'a AdaptedProcess,
}

fn check_process(
    name: &'static str,
    p: &AdaptedProcess,
    dim: usize,
    lattice: &BrownianLattice,
    levels: usize,
) -> Result<()> {
    check_dim(name, dim, p.dim())?;
    if p.covered_levels() < levels {
        return Err(Error::Input(format!(
            "{name} covers {} levels, needs {levels}",
            p.covered_levels()
        )));
    }
    for i in 0..levels {
        check_dim(name, lattice.node_count(i), p.level(i).len())?;
    }
    Ok(())
}

/// Backward induction for `(y, z)`.
pub fn solve_bsee(dynamics: &Dynamics, input: BseeInput<'_>) -> Result<(AdaptedProcess, AdaptedProcess)> {
    let lat = &dynamics.lattice;
    let n = lat.steps();
    let dim = dynamics.dim();
    let dt = lat.dt();
    if let Some(u) = input.control {
        check_process("control", u, dynamics.control_dim(), lat, n)?;
    }
    if let Some(f0) = input.extra_forcing {
        check_process("extra forcing", f0, dim, lat, n)?;
    }
    let mut y = AdaptedProcess::zeros(lat, dim, n + 1);
    let mut z = AdaptedProcess::zeros(lat, dim, n);
    for j in 0..lat.node_count(n) {
        let xi = dynamics.xi(j);
        check_dim("terminal datum", dim, xi.len())?;
        y.set(n, j, xi);
    }
    for i in (0..n).rev() {
        for j in 0..lat.node_count(i) {
            let next = y.level(i + 1);
            let zi = lat.martingale_part(next, j);
            let forcing = dynamics.state_forcing(
                i,
                j,
                input.control.map(|u| u.get(i, j)),
                input.extra_forcing.map(|f| f.get(i, j)),
            );
            let rhs = lat.mean_children(next, j) - (&*dynamics.b(i, j) * &zi + forcing) * dt;
            let yi = dynamics
                .state_steps
                .get(i, j)
                .solve(&rhs)
                .ok_or(Error::Singular { level: i, node: Some(j) })?;
            y.set(i, j, yi);
            z.set(i, j, zi);
        }
    }
    Ok((y, z))
}

/// Forward stepping for the adjoint `k` from `k_0 = initial(y0)`.
pub fn solve_see(dynamics: &Dynamics, input: &SeeInput<'_>, y0: &DVector<f64>) -> Result<AdaptedProcess> {
    let lat = &dynamics.lattice;
    let n = lat.steps();
    let dim = dynamics.dim();
    let dt = lat.dt();
    check_process("drift load", input.drift, dim, lat, n)?;
    check_process("diffusion load", input.diffusion, dim, lat, n)?;
    let mut k = AdaptedProcess::zeros(lat, dim, n + 1);
    let k0 = (input.initial)(y0);
    check_dim("adjoint initial value", dim, k0.len())?;
    k.set(0, 0, k0);
    for i in 0..n {
        for j in 0..lat.node_count(i) {
            let rhs = k.get(i, j) - input.drift.get(i, j) * dt;
            let kappa = dynamics
                .adjoint_steps
                .get(i, j)
                .solve(&rhs)
                .ok_or(Error::Singular { level: i, node: Some(j) })?;
            let vol = &*dynamics.adjoint_b(i, j) * &kappa + input.diffusion.get(i, j);
            for c in lat.children(j) {
                k.set(i + 1, c, &kappa - &vol * lat.increment(c));
            }
        }
    }
    Ok(k)
}

/// `κ_i = E_i[k_{i+1}]` on levels `0..N`.
pub fn conditional_adjoint(k: &AdaptedProcess, lattice: &BrownianLattice) -> AdaptedProcess {
    let n = lattice.steps();
    AdaptedProcess::from_fn(lattice, k.dim(), n, |i, j| lattice.mean_children(k.level(i + 1), j))
}

/// Sup-node residual of the state recursion with total drift forcing `forcing`
/// (i.e. `D u + G + f0` already summed), evaluated with the raw operators.
pub fn bsee_residual(
    dynamics: &Dynamics,
    y: &AdaptedProcess,
    z: &AdaptedProcess,
    forcing: &AdaptedProcess,
) -> f64 {
    let lat = &dynamics.lattice;
    let n = lat.steps();
    let dt = lat.dt();
    let mut worst: f64 = 0.0;
    for j in 0..lat.node_count(n) {
        worst = worst.max((y.get(n, j) - dynamics.xi(j)).amax());
    }
    for i in 0..n {
        let next = y.level(i + 1);
        for j in 0..lat.node_count(i) {
            let yi = y.get(i, j);
            let zi = z.get(i, j);
            let drift = &*dynamics.a(i, j) * yi + &*dynamics.b(i, j) * zi + forcing.get(i, j);
            for c in lat.children(j) {
                let r = &next[c] - yi - &drift * dt - zi * lat.increment(c);
                worst = worst.max(r.amax());
            }
            if lat.branching() == 1 {
                worst = worst.max(zi.amax());
            }
        }
    }
    worst
}

/// Sup-node residual of the adjoint recursion.
pub fn see_residual(
    dynamics: &Dynamics,
    k: &AdaptedProcess,
    k0: &DVector<f64>,
    drift: &AdaptedProcess,
    diffusion: &AdaptedProcess,
) -> f64 {
    let lat = &dynamics.lattice;
    let dt = lat.dt();
    let mut worst = (k.get(0, 0) - k0).amax();
    for i in 0..lat.steps() {
        let next = k.level(i + 1);
        for j in 0..lat.node_count(i) {
            let kappa = lat.mean_children(next, j);
            let r = &kappa + &*dynamics.adjoint_a(i, j) * &kappa * dt - k.get(i, j) + drift.get(i, j) * dt;
            worst = worst.max(r.amax());
            let vol = &*dynamics.adjoint_b(i, j) * &kappa + diffusion.get(i, j);
            for c in lat.children(j) {
                let r = &next[c] - &kappa + &vol * lat.increment(c);
                worst = worst.max(r.amax());
            }
        }
    }
    worst
}

/// Loads `l_y`, `l_z` of the adjoint equation along `(y, z, u)`.
pub fn integrand_loads(
    problem: &ControlProblem,
    y: &AdaptedProcess,
    z: &AdaptedProcess,
    u: &AdaptedProcess,
) -> (AdaptedProcess, AdaptedProcess) {
    let lat = problem.lattice();
    let n = lat.steps();
    let ly = AdaptedProcess::from_fn(lat, y.dim(), n, |i, j| {
        problem.integrand.grad_y(i, lat.w(i, j), y.get(i, j), z.get(i, j), u.get(i, j))
    });
    let lz = AdaptedProcess::from_fn(lat, y.dim(), n, |i, j| {
        problem.integrand.grad_z(i, lat.w(i, j), y.get(i, j), z.get(i, j), u.get(i, j))
    });
    (ly, lz)
}

/// State solve under `u`, then the adjoint along `(y, z, u)` with
/// `k_0 = −h_y(y_0)`.
pub fn solve_decoupled(problem: &ControlProblem, u: &AdaptedProcess) -> Result<TripleProcess> {
    let dynamics = &problem.dynamics;
    if !u.is_finite() {
        return Err(Error::NonFinite("control".into()));
    }
    let (y, z) = solve_bsee(
        dynamics,
        BseeInput {
            control: Some(u),
            extra_forcing: None,
        },
    )?;
    let (ly, lz) = integrand_loads(problem, &y, &z, u);
    let initial = |y0: &DVector<f64>| -problem.integrand.terminal_grad(y0);
    let k = solve_see(
        dynamics,
        &SeeInput {
            initial: &initial,
            drift: &ly,
            diffusion: &lz,
        },
        &y.get(0, 0).clone(),
    )?;
    Ok(TripleProcess { k, y, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gelfand::VectorFamily;
    use crate::lattice::TimeGrid;
    use nalgebra::{dmatrix, dvector};

    fn scalar_dynamics(
        a: f64,
        b: f64,
        g: f64,
        xi: VectorFamily,
        lattice: BrownianLattice,
    ) -> Dynamics {
        let coeffs = EvolutionCoefficients::new(
            MatrixFamily::Constant(dmatrix![a]),
            MatrixFamily::Constant(dmatrix![b]),
            MatrixFamily::Constant(dmatrix![0.0]),
            VectorFamily::Constant(dvector![g]),
            xi,
        )
        .unwrap();
        Dynamics::new(GelfandTriple::identity(1), coeffs, lattice).unwrap()
    }

    fn det(t: f64, n: usize) -> BrownianLattice {
        BrownianLattice::deterministic(TimeGrid::new(t, n).unwrap()).unwrap()
    }

    fn tree(t: f64, n: usize) -> BrownianLattice {
        BrownianLattice::tree(TimeGrid::new(t, n).unwrap()).unwrap()
    }

    #[test]
    fn bsee_constant_solution() {
        let d = scalar_dynamics(0.0, 0.0, 0.0, VectorFamily::Constant(dvector![2.5]), tree(1.0, 3));
        let (y, z) = solve_bsee(&d, BseeInput::default()).unwrap();
        assert!(y.sub(&y.map(|_| dvector![2.5])).is_zero());
        assert!(z.is_zero());
    }

    #[test]
    fn bsee_pure_integration() {
        let d = scalar_dynamics(0.0, 0.0, 1.0, VectorFamily::Constant(dvector![1.0]), det(1.0, 10));
        let (y, _) = solve_bsee(&d, BseeInput::default()).unwrap();
        assert!(y.get(0, 0)[0].abs() < 1e-14);
    }

    #[test]
    fn bsee_brownian_terminal_value() {
        let lat = tree(1.0, 2);
        let n = lat.steps();
        let w_final: Vec<f64> = (0..4).map(|j| lat.w(n, j)).collect();
        let xi = VectorFamily::random(move |_, w| dvector![w]);
        let d = scalar_dynamics(0.0, 0.0, 0.0, xi, lat.clone());
        let (y, z) = solve_bsee(&d, BseeInput::default()).unwrap();
        for (j, w) in w_final.iter().enumerate() {
            assert_eq!(y.get(2, j)[0], *w);
        }
        for i in 0..2 {
            for j in 0..lat.node_count(i) {
                assert!((y.get(i, j)[0] - lat.w(i, j)).abs() < 1e-14);
                assert!((z.get(i, j)[0] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn see_examples() {
        let d = scalar_dynamics(0.0, 0.0, 0.0, VectorFamily::zeros(1), det(2.0, 8));
        let lat = &d.lattice;
        let drift = AdaptedProcess::from_fn(lat, 1, 8, |_, _| dvector![0.75]);
        let zero = AdaptedProcess::zeros(lat, 1, 8);
        let init = |_: &DVector<f64>| dvector![3.0];
        let k = solve_see(&d, &SeeInput { initial: &init, drift: &drift, diffusion: &zero }, &dvector![0.0]).unwrap();
        for i in 0..=8 {
            assert!((k.get(i, 0)[0] - (3.0 - 0.75 * lat.grid().time(i))).abs() < 1e-13);
        }
        let k = solve_see(&d, &SeeInput { initial: &init, drift: &zero, diffusion: &zero }, &dvector![0.0]).unwrap();
        assert!(k.level(8).iter().all(|v| v[0] == 3.0));

        let d = scalar_dynamics(0.0, 1.0, 0.0, VectorFamily::zeros(1), tree(1.0, 1));
        let zero = AdaptedProcess::zeros(&d.lattice, 1, 1);
        let init = |_: &DVector<f64>| dvector![1.0];
        let k = solve_see(&d, &SeeInput { initial: &init, drift: &zero, diffusion: &zero }, &dvector![0.0]).unwrap();
        assert_eq!(k.get(1, 0)[0], 0.0);
        assert_eq!(k.get(1, 1)[0], 2.0);
    }

    #[test]
    fn residuals_vanish_on_solver_output() {
        let lat = tree(1.0, 5);
        let xi = VectorFamily::random(|_, w| dvector![1.0 + w.sin()]);
        let d = scalar_dynamics(0.7, 0.4, -0.3, xi, lat.clone());
        let (y, z) = solve_bsee(&d, BseeInput::default()).unwrap();
        let forcing = AdaptedProcess::from_fn(&lat, 1, 5, |i, j| d.state_forcing(i, j, None, None));
        assert!(bsee_residual(&d, &y, &z, &forcing) < 1e-12);

        let drift = y.truncated(5).scale(2.0);
        let diff = z.scale(-1.0);
        let init = |v: &DVector<f64>| v * -2.0;
        let k = solve_see(&d, &SeeInput { initial: &init, drift: &drift, diffusion: &diff }, y.get(0, 0)).unwrap();
        assert!(see_residual(&d, &k, &(y.get(0, 0) * -2.0), &drift, &diff) < 1e-12);
    }

    #[test]
    fn tree_and_deterministic_modes_agree_without_noise() {
        let xi = VectorFamily::Constant(dvector![1.3]);
        let a = scalar_dynamics(0.9, 0.0, 0.2, xi.clone(), tree(1.0, 6));
        let b = scalar_dynamics(0.9, 0.0, 0.2, xi, det(1.0, 6));
        let (ya, _) = solve_bsee(&a, BseeInput::default()).unwrap();
        let (yb, _) = solve_bsee(&b, BseeInput::default()).unwrap();
        assert!((ya.get(0, 0)[0] - yb.get(0, 0)[0]).abs() < 1e-12);
    }

    #[test]
    fn stability_under_terminal_perturbation() {
        let lat = tree(1.0, 6);
        let base = scalar_dynamics(0.5, 0.8, 0.0, VectorFamily::random(|_, w| dvector![w]), lat.clone());
        let bumped = scalar_dynamics(0.5, 0.8, 0.0, VectorFamily::random(|_, w| dvector![w + 1e-3]), lat);
        let (y1, _) = solve_bsee(&base, BseeInput::default()).unwrap();
        let (y2, _) = solve_bsee(&bumped, BseeInput::default()).unwrap();
        let ratio = y1.sub(&y2).max_abs() / 1e-3;
        assert!(ratio.is_finite() && ratio <= 1.0 + 1e-9, "C_stab = {ratio}");
    }

    #[test]
    fn singular_step_is_reported() {
        // I + dt·A = 0 for A = −N/T.
        let coeffs = EvolutionCoefficients::new(
            MatrixFamily::Constant(dmatrix![-4.0]),
            MatrixFamily::zeros(1, 1),
            MatrixFamily::zeros(1, 1),
            VectorFamily::zeros(1),
            VectorFamily::zeros(1),
        )
        .unwrap();
        let err = Dynamics::new(GelfandTriple::identity(1), coeffs, det(1.0, 4)).unwrap_err();
        assert!(matches!(err, Error::Singular { level: 0, .. }));
    }
}
