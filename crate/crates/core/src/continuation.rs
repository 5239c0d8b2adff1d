//! Method of continuation for the coupled forward-backward system.
//!
//! The auxiliary system at level ρ with forcings `(b0, g0, f0)` reads, per
//! node,
//!
//! ```text
//! state:   drift  A y + B z + ρ D γ(D*κ) + G + f0,           y_N = ξ
//! adjoint: drift  A* k + ρ l_y + (1−ρ) C y + b0
//!          noise  B* κ + ρ l_z + (1−ρ) C z + g0,              k_0 = −h_y(y_0)
//! ```
//!
//! At ρ = 0 the state no longer sees `k`, so one backward sweep followed by
//! one forward sweep solves it. Level ρ is reached from ρ0 by Picard
//! iteration of the map ℐ, which freezes the `(ρ−ρ0)` cross terms at the
//! previous iterate and hands them to the level-ρ0 solver as extra forcing.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlProblem;
use crate::error::{check_dim, Error, Result};
use crate::evolution::{
    bsee_residual, conditional_adjoint, integrand_loads, see_residual, solve_bsee, solve_see, BseeInput,
    SeeInput,
};
use crate::lattice::{m2_distance, m2_norm_sq, AdaptedProcess, BrownianLattice, TripleProcess};

/// Smallest continuation step the automatic choice will use.
pub const MIN_STEP: f64 = 0.05;
/// Noise scales of the contraction probes.
pub const PROBE_SCALES: [f64; 3] = [1e-2, 1e-1, 1.0];
/// A nested solve is never asked for less than this fraction of the
/// caller's tolerance.
pub const INNER_TOL_FACTOR: f64 = 0.1;
/// Otherwise it is solved to this fraction of the caller's last increment.
pub const INEXACT_FACTOR: f64 = 0.3;

/// Tolerance handed to the nested solver on a Picard step whose previous
/// increment was `last` (`INFINITY` on the first step).
pub fn inner_tolerance(tol: f64, last: f64) -> f64 {
    (tol * INNER_TOL_FACTOR).max(INEXACT_FACTOR * last)
}
/// Power steps applied to each random probe pair when measuring `K`.
const POWER_STEPS: usize = 4;
const DIVERGENCE_FACTOR: f64 = 1e8;

/// Extra loads `(b0, g0, f0)` of the auxiliary system.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryForcing {
    pub b0: AdaptedProcess,
    pub g0: AdaptedProcess,
    pub f0: AdaptedProcess,
}

impl AuxiliaryForcing {
    pub fn zeros(lattice: &BrownianLattice, dim: usize) -> Self {
        let z = AdaptedProcess::zeros(lattice, dim, lattice.steps());
        Self {
            b0: z.clone(),
            g0: z.clone(),
            f0: z,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b0.is_finite() && self.g0.is_finite() && self.f0.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContinuationMode {
    /// Stage `m` calls the converged stage `m−1` solver.
    #[default]
    Recursive,
    /// Every stage iterates directly against the ρ = 0 solver.
    Flat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    /// The constant `C` of the `(1−ρ)C` terms; the integrand's
    /// monotonicity constant when absent.
    pub monotonicity_c: Option<f64>,
    /// Continuation step; measured from the contraction constant when absent.
    pub step_delta: Option<f64>,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub measure_k: bool,
    /// Probe pairs used when measuring the contraction constant.
    pub k_probes: usize,
    pub mode: ContinuationMode,
    pub seed: u64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            monotonicity_c: None,
            step_delta: None,
            picard_tol: 1e-9,
            max_picard: 200,
            measure_k: true,
            k_probes: 6,
            mode: ContinuationMode::Recursive,
            seed: 0,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("continuation.{field}"),
                message: message.into(),
            })
        };
        if let Some(d) = self.step_delta {
            if !(d > 0.0 && d <= 1.0) {
                return bad("step_delta", "must lie in (0, 1]");
            }
        }
        if !(self.picard_tol > 0.0 && self.picard_tol.is_finite()) {
            return bad("picard_tol", "must be positive");
        }
        if self.max_picard == 0 {
            return bad("max_picard", "must be positive");
        }
        if let Some(c) = self.monotonicity_c {
            if !(c > 0.0 && c.is_finite()) {
                return bad("monotonicity_c", "must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationReport {
    pub mode: ContinuationMode,
    pub monotonicity_c: f64,
    pub step_delta: f64,
    pub measured_k: Option<f64>,
    pub halved: bool,
    pub rho_schedule: Vec<f64>,
    pub picard_iterations: Vec<usize>,
    pub picard_increments: Vec<Vec<f64>>,
    pub contraction_ratios: Vec<Vec<f64>>,
    /// Number of ρ = 0 solves performed, nested levels included.
    pub base_solves: usize,
    pub final_residual: f64,
    pub duality_residual: f64,
}

/// `u = γ(D*κ)` with `κ = E_i[k_{i+1}]` on every node of levels `0..N`.
pub fn control_from_adjoint(problem: &ControlProblem, k: &AdaptedProcess) -> Result<AdaptedProcess> {
    let lat = problem.lattice();
    let dynamics = &problem.dynamics;
    let kappa = conditional_adjoint(k, lat);
    let mut u = AdaptedProcess::zeros(lat, dynamics.control_dim(), lat.steps());
    for i in 0..lat.steps() {
        for j in 0..lat.node_count(i) {
            let v = &*dynamics.adjoint_d(i, j) * kappa.get(i, j);
            u.set(i, j, problem.minimizer.gamma(i, j, &v)?);
        }
    }
    Ok(u)
}

fn d_times(problem: &ControlProblem, u: &AdaptedProcess) -> AdaptedProcess {
    let lat = problem.lattice();
    AdaptedProcess::from_fn(lat, problem.dynamics.dim(), lat.steps(), |i, j| {
        &*problem.dynamics.d(i, j) * u.get(i, j)
    })
}

/// Solves the ρ = 0 auxiliary system: `(y, z)` first, then `k`.
pub fn solve_rho_zero(problem: &ControlProblem, c: f64, forcing: &AuxiliaryForcing) -> Result<TripleProcess> {
    if !forcing.is_finite() {
        return Err(Error::NonFinite("auxiliary forcing".into()));
    }
    let dynamics = &problem.dynamics;
    let (y, z) = solve_bsee(
        dynamics,
        BseeInput {
            control: None,
            extra_forcing: Some(&forcing.f0),
        },
    )?;
    let n = problem.lattice().steps();
    let drift = y.truncated(n).scale(c).add(&forcing.b0);
    let diffusion = z.scale(c).add(&forcing.g0);
    let initial = |y0: &DVector<f64>| -problem.integrand.terminal_grad(y0);
    let k = solve_see(
        dynamics,
        &SeeInput {
            initial: &initial,
            drift: &drift,
            diffusion: &diffusion,
        },
        y.get(0, 0),
    )?;
    Ok(TripleProcess { k, y, z })
}

/// Folds the frozen `(ρ−ρ0)` terms evaluated at `lam_prime` into the forcing.
pub fn fold_forcing(
    problem: &ControlProblem,
    c: f64,
    lam_prime: &TripleProcess,
    delta_rho: f64,
    forcing: &AuxiliaryForcing,
) -> Result<AuxiliaryForcing> {
    lam_prime.check_shape(problem.lattice())?;
    check_dim("frozen triple", problem.dynamics.dim(), lam_prime.dim())?;
    if delta_rho == 0.0 {
        return Ok(forcing.clone());
    }
    if !lam_prime.is_finite() {
        return Err(Error::NonFinite("frozen triple".into()));
    }
    let n = problem.lattice().steps();
    let u = control_from_adjoint(problem, &lam_prime.k)?;
    let y = lam_prime.y.truncated(n);
    let (ly, lz) = integrand_loads(problem, &y, &lam_prime.z, &u);
    let out = AuxiliaryForcing {
        b0: forcing.b0.add(&ly.add_scaled(&y, -c).scale(delta_rho)),
        g0: forcing.g0.add(&lz.add_scaled(&lam_prime.z, -c).scale(delta_rho)),
        f0: forcing.f0.add_scaled(&d_times(problem, &u), delta_rho),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("folded forcing".into()));
    }
    Ok(out)
}

/// One evaluation of the map ℐ from ρ0 to ρ.
#[allow(clippy::too_many_arguments)]
pub fn apply_map_i(
    problem: &ControlProblem,
    c: f64,
    lam_prime: &TripleProcess,
    rho: f64,
    rho0: f64,
    forcing: &AuxiliaryForcing,
    solver_at_rho0: &mut dyn FnMut(&AuxiliaryForcing) -> Result<TripleProcess>,
) -> Result<TripleProcess> {
    let folded = fold_forcing(problem, c, lam_prime, rho - rho0, forcing)?;
    solver_at_rho0(&folded)
}

/// Result of one Picard run.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub solution: TripleProcess,
    pub increments: Vec<f64>,
}

impl StageOutcome {
    pub fn iterations(&self) -> usize {
        self.increments.len()
    }
}

fn picard(
    problem: &ControlProblem,
    rho: f64,
    warm: TripleProcess,
    tol: f64,
    max_picard: usize,
    mut map: impl FnMut(&TripleProcess, f64) -> Result<TripleProcess>,
) -> Result<StageOutcome> {
    let lat = problem.lattice();
    let triple = &problem.dynamics.triple;
    let mut lam = warm;
    let mut increments: Vec<f64> = Vec::new();
    for _ in 0..max_picard {
        let last = increments.last().copied().unwrap_or(f64::INFINITY);
        let inner_tol = inner_tolerance(tol, last);
        let next = map(&lam, inner_tol)?;
        let inc = m2_distance(&next, &lam, lat, triple)?;
        // Rounding floor relative to the size of the iterate.
        let floor = 64.0 * f64::EPSILON * m2_norm_sq(&next, lat, triple)?.sqrt();
        increments.push(inc);
        lam = next;
        if inc < tol.max(floor) {
            return Ok(StageOutcome {
                solution: lam,
                increments,
            });
        }
        if !inc.is_finite() || inc > DIVERGENCE_FACTOR * increments[0].max(tol) {
            break;
        }
    }
    let n = increments.len();
    let last = increments.last().copied().unwrap_or(f64::NAN);
    let ratio = if n >= 2 { last / increments[n - 2] } else { f64::NAN };
    Err(Error::NonConvergence {
        rho,
        iterations: n,
        last_increment: last,
        ratio,
    })
}

/// Picard iteration of ℐ from `warm` until the 𝕄² increment drops below
/// `config.picard_tol`.
#[allow(clippy::too_many_arguments)]
pub fn solve_stage(
    problem: &ControlProblem,
    config: &ContinuationConfig,
    c: f64,
    rho: f64,
    rho0: f64,
    forcing: &AuxiliaryForcing,
    solver_at_rho0: &mut dyn FnMut(&AuxiliaryForcing) -> Result<TripleProcess>,
    warm: TripleProcess,
) -> Result<StageOutcome> {
    if let Some(d) = config.step_delta {
        if (rho - rho0).abs() > d + 1e-12 {
            return Err(Error::Input(format!(
                "stage from {rho0} to {rho} exceeds step {d}"
            )));
        }
    }
    picard(problem, rho, warm, config.picard_tol, config.max_picard, |lam, _| {
        apply_map_i(problem, c, lam, rho, rho0, forcing, solver_at_rho0)
    })
}

/// Contraction constant estimate `max ‖ℐΛ1 − ℐΛ2‖² / (|ρ−ρ0| ‖Λ1 − Λ2‖²)`
/// for ℐ from ρ0 = 0 to ρ = 1 (so the denominator weight is one), over
/// `probes` random pairs around `base`. Each pair is followed by a few power
/// steps (the next pair is `base` and `base` plus the rescaled image
/// difference), which steer the probes toward the most expanded direction.
pub fn measure_contraction_k(
    problem: &ControlProblem,
    c: f64,
    base: &TripleProcess,
    forcing: &AuxiliaryForcing,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let lat = problem.lattice();
    let triple = &problem.dynamics.triple;
    let dim = problem.dynamics.dim();
    let mut solver = |f: &AuxiliaryForcing| solve_rho_zero(problem, c, f);
    let mut map = |lam: &TripleProcess| apply_map_i(problem, c, lam, 1.0, 0.0, forcing, &mut solver);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k: f64 = 0.0;
    let mut any = false;
    for p in 0..probes {
        let scale = PROBE_SCALES[p % PROBE_SCALES.len()];
        let mut l1 = base.add_scaled(&probe_noise(lat, dim, &mut rng), scale);
        let mut l2 = base.add_scaled(&probe_noise(lat, dim, &mut rng), scale);
        for _ in 0..=POWER_STEPS {
            let gap = m2_distance(&l1, &l2, lat, triple)?;
            if gap == 0.0 || !gap.is_finite() {
                break;
            }
            let (i1, i2) = (map(&l1)?, map(&l2)?);
            let out = m2_distance(&i1, &i2, lat, triple)?;
            any = true;
            k = k.max((out / gap).powi(2));
            if out == 0.0 {
                break;
            }
            // Next pair: the image difference, rescaled to the probe scale.
            let dir = i1.sub(&i2).scale(gap / out);
            l2 = base.clone();
            l1 = base.add_scaled(&dir, 1.0);
        }
    }
    if !any {
        return Err(Error::Input("all contraction probes were degenerate".into()));
    }
    Ok(k)
}

/// `δ₀ = min(1/(2K), 1)`.
pub fn suggested_step(k: f64) -> f64 {
    if k <= 0.0 {
        1.0
    } else {
        (0.5 / k).min(1.0)
    }
}

/// Ratios `‖ℐΛ1 − ℐΛ2‖ / ‖Λ1 − Λ2‖` of ℐ from ρ0 = 0 to `rho` for
/// `probes` random pairs around `base`. Degenerate pairs are skipped.
#[allow(clippy::too_many_arguments)]
pub fn probe_ratios(
    problem: &ControlProblem,
    c: f64,
    base: &TripleProcess,
    rho: f64,
    forcing: &AuxiliaryForcing,
    probes: usize,
    seed: u64,
    solver_at_rho0: &mut dyn FnMut(&AuxiliaryForcing) -> Result<TripleProcess>,
) -> Result<Vec<f64>> {
    probe_ratios_from(problem, c, base, rho, 0.0, forcing, probes, seed, solver_at_rho0)
}

/// Node-wise noise plus one random offset shared by every node. The offset
/// reaches the slowly varying directions that node-wise noise averages out.
fn probe_noise(lattice: &BrownianLattice, dim: usize, rng: &mut ChaCha8Rng) -> TripleProcess {
    let noise = TripleProcess::random(lattice, dim, 1.0, rng);
    let mut offset = || DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
    let (ok, oy, oz) = (offset(), offset(), offset());
    TripleProcess {
        k: noise.k.map(|v| v + &ok),
        y: noise.y.map(|v| v + &oy),
        z: noise.z.map(|v| v + &oz),
    }
}

#[allow(clippy::too_many_arguments)]
fn probe_ratios_from(
    problem: &ControlProblem,
    c: f64,
    base: &TripleProcess,
    rho: f64,
    rho0: f64,
    forcing: &AuxiliaryForcing,
    probes: usize,
    seed: u64,
    solver_at_rho0: &mut dyn FnMut(&AuxiliaryForcing) -> Result<TripleProcess>,
) -> Result<Vec<f64>> {
    let lat = problem.lattice();
    let triple = &problem.dynamics.triple;
    let dim = problem.dynamics.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(probes);
    for p in 0..probes {
        let scale = PROBE_SCALES[p % PROBE_SCALES.len()];
        let l1 = base.add_scaled(&probe_noise(lat, dim, &mut rng), scale);
        let l2 = base.add_scaled(&probe_noise(lat, dim, &mut rng), scale);
        let gap = m2_distance(&l1, &l2, lat, triple)?;
        if gap == 0.0 {
            continue;
        }
        let i1 = apply_map_i(problem, c, &l1, rho, rho0, forcing, solver_at_rho0)?;
        let i2 = apply_map_i(problem, c, &l2, rho, rho0, forcing, solver_at_rho0)?;
        let out = m2_distance(&i1, &i2, lat, triple)? / gap;
        ratios.push(out);
    }
    if ratios.is_empty() {
        return Err(Error::Input("all contraction probes were degenerate".into()));
    }
    Ok(ratios)
}

/// Sup-node residual of both discrete recursions of the coupled system at
/// `lam`, with `u = γ(D*κ)` recomputed from `lam`.
pub fn hamiltonian_system_residual(problem: &ControlProblem, lam: &TripleProcess) -> Result<f64> {
    lam.check_shape(problem.lattice())?;
    let u = control_from_adjoint(problem, &lam.k)?;
    decoupled_residual(problem, lam, &u)
}

/// Sup-node residual of the state recursion under `u` and of the adjoint
/// recursion with loads along `(y, z, u)`.
pub fn decoupled_residual(problem: &ControlProblem, lam: &TripleProcess, u: &AdaptedProcess) -> Result<f64> {
    let dynamics = &problem.dynamics;
    let lat = problem.lattice();
    let n = lat.steps();
    let forcing = AdaptedProcess::from_fn(lat, dynamics.dim(), n, |i, j| {
        dynamics.state_forcing(i, j, Some(u.get(i, j)), None)
    });
    let state = bsee_residual(dynamics, &lam.y, &lam.z, &forcing);
    let (ly, lz) = integrand_loads(problem, &lam.y.truncated(n), &lam.z, u);
    let k0 = -problem.integrand.terminal_grad(lam.y.get(0, 0));
    let adjoint = see_residual(dynamics, &lam.k, &k0, &ly, &lz);
    let r = state.max(adjoint);
    Ok(if r.is_nan() { f64::INFINITY } else { r })
}

/// Summation-by-parts identity for two (triple, control) pairs:
/// `Σ_i |E(Δk,Δy)_{i+1} − E(Δk,Δy)_i − dt E[(Δκ,ΔF) − (Δl_y,Δy) − (Δl_z,Δz)]_i|`
/// with `F = D u + G` and loads recomputed from the processes.
pub fn duality_residual_with_controls(
    problem: &ControlProblem,
    lam1: &TripleProcess,
    u1: &AdaptedProcess,
    lam2: &TripleProcess,
    u2: &AdaptedProcess,
) -> Result<f64> {
    let lat = problem.lattice();
    lam1.check_shape(lat)?;
    lam2.check_shape(lat)?;
    let dynamics = &problem.dynamics;
    let triple = &dynamics.triple;
    let mass_u = &dynamics.coeffs.mass_u;
    let n = lat.steps();
    let dt = lat.dt();
    let loads = |lam: &TripleProcess, u: &AdaptedProcess| integrand_loads(problem, &lam.y.truncated(n), &lam.z, u);
    let (ly1, lz1) = loads(lam1, u1);
    let (ly2, lz2) = loads(lam2, u2);
    let dk = lam1.k.sub(&lam2.k);
    let dy = lam1.y.sub(&lam2.y);
    let dz = lam1.z.sub(&lam2.z);
    let du = u1.sub(u2);
    let kappa = conditional_adjoint(&dk, lat);
    let pairing = |i: usize| {
        let vals: Vec<f64> = (0..lat.node_count(i))
            .map(|j| triple.inner_h_unchecked(dk.get(i, j), dy.get(i, j)))
            .collect();
        lat.expectation_of(i, &vals)
    };
    let mut total = 0.0;
    let mut prev = pairing(0);
    for i in 0..n {
        let vals: Vec<f64> = (0..lat.node_count(i))
            .map(|j| {
                // (κ, D Δu)_H computed as (D*κ, Δu)_U to keep G out of the difference.
                let control = (&*dynamics.adjoint_d(i, j) * kappa.get(i, j)).dot(&(mass_u * du.get(i, j)));
                control
                    - triple.inner_h_unchecked(&(ly1.get(i, j) - ly2.get(i, j)), dy.get(i, j))
                    - triple.inner_h_unchecked(&(lz1.get(i, j) - lz2.get(i, j)), dz.get(i, j))
            })
            .collect();
        let next = pairing(i + 1);
        total += (next - prev - dt * lat.expectation_of(i, &vals)).abs();
        prev = next;
    }
    Ok(if total.is_nan() { f64::INFINITY } else { total })
}

/// Duality residual for two solutions of the coupled system, with
/// `u = γ(D*κ)` recomputed from each triple.
pub fn duality_residual(problem: &ControlProblem, lam1: &TripleProcess, lam2: &TripleProcess) -> Result<f64> {
    let u1 = control_from_adjoint(problem, &lam1.k)?;
    let u2 = control_from_adjoint(problem, &lam2.k)?;
    duality_residual_with_controls(problem, lam1, &u1, lam2, &u2)
}

/// The nested continuation solver. Level `m` solves the auxiliary system at
/// `schedule[m]` for any forcing; it keeps its last fixed point as the warm
/// start of its next call.
struct Continuation<'a> {
    problem: &'a ControlProblem,
    c: f64,
    schedule: Vec<f64>,
    tol: f64,
    max_picard: usize,
    mode: ContinuationMode,
    warm: Vec<Option<TripleProcess>>,
    base_solves: usize,
}

impl Continuation<'_> {
    fn warm_start(&self, m: usize) -> TripleProcess {
        (0..=m)
            .rev()
            .find_map(|l| self.warm[l].clone())
            .unwrap_or_else(|| TripleProcess::zeros(self.problem.lattice(), self.problem.dynamics.dim()))
    }

    fn solve_level(&mut self, m: usize, forcing: &AuxiliaryForcing, tol: f64) -> Result<StageOutcome> {
        if m == 0 {
            self.base_solves += 1;
            let sol = solve_rho_zero(self.problem, self.c, forcing)?;
            self.warm[0] = Some(sol.clone());
            return Ok(StageOutcome {
                solution: sol,
                increments: Vec::new(),
            });
        }
        let warm = self.warm_start(m);
        let (problem, rho, max) = (self.problem, self.schedule[m], self.max_picard);
        let out = picard(problem, rho, warm, tol, max, |lam, inner| self.apply(m, lam, forcing, inner))?;
        self.warm[m] = Some(out.solution.clone());
        Ok(out)
    }

    fn apply(&mut self, m: usize, lam: &TripleProcess, forcing: &AuxiliaryForcing, inner_tol: f64) -> Result<TripleProcess> {
        let rho = self.schedule[m];
        match self.mode {
            ContinuationMode::Recursive => {
                let folded = fold_forcing(self.problem, self.c, lam, rho - self.schedule[m - 1], forcing)?;
                Ok(self.solve_level(m - 1, &folded, inner_tol)?.solution)
            }
            ContinuationMode::Flat => {
                let folded = fold_forcing(self.problem, self.c, lam, rho, forcing)?;
                self.base_solves += 1;
                solve_rho_zero(self.problem, self.c, &folded)
            }
        }
    }

    /// Ratios of the stage-`m` map on pairs around `base`, leaving warm
    /// starts untouched.
    fn stage_ratios(&mut self, m: usize, base: &TripleProcess, probes: usize, seed: u64) -> Result<Vec<f64>> {
        let saved = self.warm.clone();
        let forcing = AuxiliaryForcing::zeros(self.problem.lattice(), self.problem.dynamics.dim());
        let (problem, c, inner_tol) = (self.problem, self.c, self.tol * INNER_TOL_FACTOR);
        let rho0 = match self.mode {
            ContinuationMode::Recursive => self.schedule[m - 1],
            ContinuationMode::Flat => 0.0,
        };
        let result = probe_ratios_from(problem, c, base, self.schedule[m], rho0, &forcing, probes, seed, &mut |f| {
            match self.mode {
                ContinuationMode::Recursive => self.solve_level(m - 1, f, inner_tol).map(|o| o.solution),
                ContinuationMode::Flat => solve_rho_zero(problem, c, f),
            }
        });
        self.warm = saved;
        result
    }
}

fn schedule(step: f64) -> Vec<f64> {
    let stages = (1.0 / step - 1e-9).ceil().max(1.0) as usize;
    let mut s: Vec<f64> = (0..=stages).map(|m| (m as f64 * step).min(1.0)).collect();
    *s.last_mut().expect("non-empty") = 1.0;
    s
}

/// Solves the coupled system by continuation from ρ = 0 to ρ = 1 with zero
/// auxiliary forcing, retrying once with half the step on non-convergence.
pub fn solve_hamiltonian_system(
    problem: &ControlProblem,
    config: &ContinuationConfig,
) -> Result<(TripleProcess, ContinuationReport)> {
    solve_hamiltonian_system_from(problem, config, None)
}

/// Like [`solve_hamiltonian_system`], with every stage's outer iteration
/// started from `initial` instead of the previous stage's fixed point.
pub fn solve_hamiltonian_system_from(
    problem: &ControlProblem,
    config: &ContinuationConfig,
    initial: Option<&TripleProcess>,
) -> Result<(TripleProcess, ContinuationReport)> {
    config.validate()?;
    if let Some(init) = initial {
        init.check_shape(problem.lattice())?;
        if init.dim() != problem.dynamics.dim() {
            return Err(Error::Dimension {
                context: "initial triple",
                expected: problem.dynamics.dim(),
                actual: init.dim(),
            });
        }
    }
    let lat = problem.lattice();
    let dim = problem.dynamics.dim();
    let c = config.monotonicity_c.unwrap_or_else(|| problem.integrand.monotonicity_c());
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Validation(format!(
            "monotonicity constant {c} must be positive to run continuation"
        )));
    }
    let zero = AuxiliaryForcing::zeros(lat, dim);
    let mut measured_k = None;
    let step = match config.step_delta {
        Some(d) => d,
        None => {
            let base = solve_rho_zero(problem, c, &zero)?;
            let k = measure_contraction_k(problem, c, &base, &zero, config.k_probes.max(1), config.seed)?;
            measured_k = Some(k);
            suggested_step(k).max(MIN_STEP)
        }
    };
    if config.measure_k && measured_k.is_none() {
        let base = solve_rho_zero(problem, c, &zero)?;
        measured_k = Some(measure_contraction_k(problem, c, &base, &zero, config.k_probes.max(1), config.seed)?);
    }
    match run(problem, config, c, step, initial) {
        Ok((sol, mut report)) => {
            report.measured_k = measured_k;
            Ok((sol, report))
        }
        Err(Error::NonConvergence { .. }) => {
            let (sol, mut report) = run(problem, config, c, (step * 0.5).max(f64::MIN_POSITIVE), initial)?;
            report.measured_k = measured_k;
            report.halved = true;
            Ok((sol, report))
        }
        Err(e) => Err(e),
    }
}

fn run(
    problem: &ControlProblem,
    config: &ContinuationConfig,
    c: f64,
    step: f64,
    initial: Option<&TripleProcess>,
) -> Result<(TripleProcess, ContinuationReport)> {
    let lat = problem.lattice();
    let dim = problem.dynamics.dim();
    let zero = AuxiliaryForcing::zeros(lat, dim);
    let rho_schedule = schedule(step);
    let mut solver = Continuation {
        problem,
        c,
        schedule: rho_schedule.clone(),
        tol: config.picard_tol,
        max_picard: config.max_picard,
        mode: config.mode,
        warm: vec![None; rho_schedule.len()],
        base_solves: 0,
    };
    if let Some(init) = initial {
        for w in solver.warm.iter_mut().skip(1) {
            *w = Some(init.clone());
        }
    }
    let mut picard_iterations = vec![0];
    let mut picard_increments = vec![Vec::new()];
    let mut contraction_ratios = vec![Vec::new()];
    let mut solution = solver.solve_level(0, &zero, config.picard_tol)?.solution;
    for m in 1..rho_schedule.len() {
        if config.mode == ContinuationMode::Flat && initial.is_none() {
            // Earlier levels are not needed as solvers; only as warm starts.
            solver.warm[m] = Some(solution.clone());
        }
        let out = solver.solve_level(m, &zero, config.picard_tol)?;
        picard_iterations.push(out.iterations());
        picard_increments.push(out.increments);
        solution = out.solution;
        contraction_ratios.push(if config.measure_k {
            solver.stage_ratios(m, &solution, PROBE_SCALES.len(), config.seed.wrapping_add(m as u64))?
        } else {
            Vec::new()
        });
    }
    let final_residual = hamiltonian_system_residual(problem, &solution)?;

    // Compare against a decoupled solve under a perturbed control.
    let u = control_from_adjoint(problem, &solution.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let bumped = u.add_scaled(
        &AdaptedProcess::random(lat, u.dim(), lat.steps(), 1.0, &mut rng),
        1e-2,
    );
    let other = crate::evolution::solve_decoupled(problem, &bumped)?;
    let duality = duality_residual_with_controls(problem, &solution, &u, &other, &bumped)?;

    let report = ContinuationReport {
        mode: config.mode,
        monotonicity_c: c,
        step_delta: step,
        measured_k: None,
        halved: false,
        rho_schedule,
        picard_iterations,
        picard_increments,
        contraction_ratios,
        base_solves: solver.base_solves,
        final_residual,
        duality_residual: duality,
    };
    Ok((solution, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{lq_problem, LqSpec};
    use crate::lattice::LatticeMode;

    #[test]
    fn schedule_ends_at_one() {
        assert_eq!(schedule(1.0), vec![0.0, 1.0]);
        assert_eq!(schedule(0.5), vec![0.0, 0.5, 1.0]);
        let s = schedule(0.3);
        assert_eq!(s.len(), 5);
        assert_eq!(*s.last().unwrap(), 1.0);
        assert!(s.windows(2).all(|w| w[1] - w[0] <= 0.3 + 1e-15));
    }

    #[test]
    fn suggested_step_examples() {
        assert_eq!(suggested_step(4.0), 0.125);
        assert_eq!(suggested_step(0.0), 1.0);
        assert_eq!(suggested_step(0.1), 1.0);
    }

    #[test]
    fn map_is_constant_when_rho_equals_rho0() {
        let p = lq_problem(&LqSpec::unit(LatticeMode::Tree, 3)).unwrap();
        let lat = p.lattice();
        let zero = AuxiliaryForcing::zeros(lat, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = TripleProcess::random(lat, 1, 1.0, &mut rng);
        let b = TripleProcess::random(lat, 1, 1.0, &mut rng);
        let mut base = |f: &AuxiliaryForcing| solve_rho_zero(&p, 2.0, f);
        let ia = apply_map_i(&p, 2.0, &a, 0.0, 0.0, &zero, &mut base).unwrap();
        let ib = apply_map_i(&p, 2.0, &b, 0.0, 0.0, &zero, &mut base).unwrap();
        assert_eq!(ia, ib);
        let cfg = ContinuationConfig::default();
        let out = solve_stage(&p, &cfg, 2.0, 0.0, 0.0, &zero, &mut base, a).unwrap();
        assert!(out.iterations() <= 2);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mut spec = LqSpec::unit(LatticeMode::Tree, 3);
        spec.xi0 = nalgebra::dvector![0.0];
        let p = lq_problem(&spec).unwrap();
        let lat = p.lattice();
        let zero = AuxiliaryForcing::zeros(lat, 1);
        let lam = TripleProcess::zeros(lat, 1);
        let mut base = |f: &AuxiliaryForcing| solve_rho_zero(&p, 2.0, f);
        let out = apply_map_i(&p, 2.0, &lam, 1.0, 0.0, &zero, &mut base).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        let (sol, report) = solve_hamiltonian_system(&p, &ContinuationConfig::default()).unwrap();
        assert_eq!(sol.max_abs(), 0.0);
        assert!(report.picard_iterations.iter().all(|&n| n <= 1));
    }

    #[test]
    fn rho_zero_matches_sequential_sweeps() {
        let p = lq_problem(&LqSpec::unit(LatticeMode::Tree, 4)).unwrap();
        let lat = p.lattice();
        let zero = AuxiliaryForcing::zeros(lat, 1);
        let stage0 = solve_rho_zero(&p, 2.0, &zero).unwrap();
        let (y, z) = solve_bsee(&p.dynamics, BseeInput::default()).unwrap();
        let init = |y0: &DVector<f64>| -p.integrand.terminal_grad(y0);
        let k = solve_see(
            &p.dynamics,
            &SeeInput {
                initial: &init,
                drift: &y.truncated(4).scale(2.0),
                diffusion: &z.scale(2.0),
            },
            y.get(0, 0),
        )
        .unwrap();
        let seq = TripleProcess { k, y, z };
        assert!(m2_distance(&stage0, &seq, lat, &p.dynamics.triple).unwrap() < 1e-12);
    }

    #[test]
    fn no_coupling_gives_zero_contraction() {
        let mut spec = LqSpec::unit(LatticeMode::Tree, 3);
        spec.d = nalgebra::dmatrix![0.0];
        let p = lq_problem(&spec).unwrap();
        let lat = p.lattice();
        let zero = AuxiliaryForcing::zeros(lat, 1);
        let base = solve_rho_zero(&p, 2.0, &zero).unwrap();
        let k = measure_contraction_k(&p, 2.0, &base, &zero, 6, 3).unwrap();
        assert!(k < 1e-20, "K = {k}");
        assert_eq!(suggested_step(k), 1.0);
    }

    #[test]
    fn converged_solution_is_a_fixed_point_with_small_residual() {
        let p = lq_problem(&LqSpec::unit(LatticeMode::Tree, 4)).unwrap();
        let cfg = ContinuationConfig {
            picard_tol: 1e-11,
            ..ContinuationConfig::default()
        };
        let (sol, report) = solve_hamiltonian_system(&p, &cfg).unwrap();
        assert!(report.final_residual < 1e-8, "{report:?}");
        assert!(report.duality_residual < 1e-8, "{report:?}");
        assert_eq!(*report.rho_schedule.last().unwrap(), 1.0);
        let res = hamiltonian_system_residual(&p, &sol).unwrap();
        assert_eq!(res, report.final_residual);
    }

    #[test]
    fn flat_mode_agrees_with_recursive_when_it_converges() {
        let mut spec = LqSpec::unit(LatticeMode::Tree, 3);
        spec.d = nalgebra::dmatrix![0.3];
        let p = lq_problem(&spec).unwrap();
        let base = ContinuationConfig {
            picard_tol: 1e-12,
            step_delta: Some(0.5),
            ..ContinuationConfig::default()
        };
        let (a, _) = solve_hamiltonian_system(&p, &base).unwrap();
        let flat = ContinuationConfig {
            mode: ContinuationMode::Flat,
            ..base
        };
        let (b, _) = solve_hamiltonian_system(&p, &flat).unwrap();
        assert!(m2_distance(&a, &b, p.lattice(), &p.dynamics.triple).unwrap() < 1e-10);
    }

    #[test]
    fn duality_examples() {
        let p = lq_problem(&LqSpec::unit(LatticeMode::Tree, 4)).unwrap();
        let lat = p.lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u1 = AdaptedProcess::random(lat, 1, 4, 1.0, &mut rng);
        let u2 = AdaptedProcess::random(lat, 1, 4, 1.0, &mut rng);
        let l1 = crate::evolution::solve_decoupled(&p, &u1).unwrap();
        let l2 = crate::evolution::solve_decoupled(&p, &u2).unwrap();
        assert_eq!(duality_residual_with_controls(&p, &l1, &u1, &l1, &u1).unwrap(), 0.0);
        assert!(duality_residual_with_controls(&p, &l1, &u1, &l2, &u2).unwrap() < 1e-8);
        let g1 = TripleProcess::random(lat, 1, 1.0, &mut rng);
        let g2 = TripleProcess::random(lat, 1, 1.0, &mut rng);
        assert!(duality_residual(&p, &g1, &g2).unwrap() > 1e-2);
    }

    #[test]
    fn config_validation() {
        let bad = ContinuationConfig {
            step_delta: Some(1.5),
            ..ContinuationConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = ContinuationConfig {
            picard_tol: 0.0,
            ..ContinuationConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
