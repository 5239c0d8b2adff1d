//! Time grid, the binary Brownian event tree and processes adapted to it.
//!
//! Level `i` of the tree holds `2^i` nodes; node `j` has children `2j` (up,
//! increment `+√dt`) and `2j + 1` (down, `−√dt`). Every level-`(i+1)` variable
//! is therefore affine in the increment, which makes conditional expectations
//! and the martingale integrand exact. The deterministic mode is a one-node
//! chain with zero increments.
//!
//! Expectations use a pairwise (sibling-first) summation so that the tower
//! property `E[E_i X_{i+1}] = E[X_{i+1}]` holds bit for bit.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::gelfand::GelfandTriple;

pub const DEFAULT_TREE_CAP: usize = 16;
pub const DEFAULT_DETERMINISTIC_CAP: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Input(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Input("number of time steps must be positive".into()));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.steps {
            self.horizon
        } else {
            level as f64 * self.dt
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeMode {
    Deterministic,
    Tree,
}

#[derive(Debug, Clone)]
pub struct BrownianLattice {
    grid: TimeGrid,
    mode: LatticeMode,
    sqrt_dt: f64,
    w: Vec<Vec<f64>>,
}

impl BrownianLattice {
    pub fn tree(grid: TimeGrid) -> Result<Self> {
        Self::tree_with_cap(grid, DEFAULT_TREE_CAP)
    }

    pub fn tree_with_cap(grid: TimeGrid, cap: usize) -> Result<Self> {
        if grid.steps() > cap {
            return Err(Error::Lattice(format!(
                "tree mode needs N <= {cap} (2^N leaves), got N = {}",
                grid.steps()
            )));
        }
        let sqrt_dt = grid.dt().sqrt();
        let mut w = vec![vec![0.0]];
        for i in 0..grid.steps() {
            let prev = &w[i];
            let mut next = Vec::with_capacity(prev.len() * 2);
            for &wp in prev {
                next.push(wp + sqrt_dt);
                next.push(wp - sqrt_dt);
            }
            w.push(next);
        }
        Ok(Self {
            grid,
            mode: LatticeMode::Tree,
            sqrt_dt,
            w,
        })
    }

    /// Single-path chain with `W ≡ 0`.
    pub fn deterministic(grid: TimeGrid) -> Result<Self> {
        if grid.steps() > DEFAULT_DETERMINISTIC_CAP {
            return Err(Error::Lattice(format!(
                "deterministic mode needs N <= {DEFAULT_DETERMINISTIC_CAP}, got N = {}",
                grid.steps()
            )));
        }
        Ok(Self {
            grid,
            mode: LatticeMode::Deterministic,
            sqrt_dt: grid.dt().sqrt(),
            w: vec![vec![0.0]; grid.steps() + 1],
        })
    }

    pub fn new(grid: TimeGrid, mode: LatticeMode) -> Result<Self> {
        match mode {
            LatticeMode::Tree => Self::tree(grid),
            LatticeMode::Deterministic => Self::deterministic(grid),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn mode(&self) -> LatticeMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn branching(&self) -> usize {
        match self.mode {
            LatticeMode::Tree => 2,
            LatticeMode::Deterministic => 1,
        }
    }

    pub fn node_count(&self, level: usize) -> usize {
        self.w[level].len()
    }

    pub fn total_nodes(&self, levels: usize) -> usize {
        (0..levels).map(|i| self.node_count(i)).sum()
    }

    pub fn probability(&self, level: usize) -> f64 {
        1.0 / self.node_count(level) as f64
    }

    pub fn w(&self, level: usize, node: usize) -> f64 {
        self.w[level][node]
    }

    pub fn children(&self, node: usize) -> std::ops::Range<usize> {
        let b = self.branching();
        node * b..node * b + b
    }

    /// Brownian increment leading into `child` (an index on the next level).
    pub fn increment(&self, child: usize) -> f64 {
        match self.mode {
            LatticeMode::Deterministic => 0.0,
            LatticeMode::Tree => {
                if child.is_multiple_of(2) {
                    self.sqrt_dt
                } else {
                    -self.sqrt_dt
                }
            }
        }
    }

    /// Probability-weighted sum of per-node scalars on one level.
    pub fn expectation_of(&self, level: usize, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.node_count(level));
        pairwise_sum(values) * self.probability(level)
    }

    /// `E_i[X_{i+1}]` for scalars stored on the next level.
    pub fn mean_children(&self, next: &[DVector<f64>], node: usize) -> DVector<f64> {
        match self.mode {
            LatticeMode::Deterministic => next[node].clone(),
            LatticeMode::Tree => (&next[2 * node] + &next[2 * node + 1]) * 0.5,
        }
    }

    /// Martingale integrand `(X_up − X_down) / (2√dt)` of a next-level variable.
    pub fn martingale_part(&self, next: &[DVector<f64>], node: usize) -> DVector<f64> {
        match self.mode {
            LatticeMode::Deterministic => DVector::zeros(next[node].len()),
            LatticeMode::Tree => (&next[2 * node] - &next[2 * node + 1]) / (2.0 * self.sqrt_dt),
        }
    }
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n.next_power_of_two() / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// A vector-valued process with one value per lattice node on the levels it
/// covers. Adaptedness is structural: the value sits on a Brownian history.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    levels: Vec<Vec<DVector<f64>>>,
}

impl AdaptedProcess {
    /// Zero process on levels `0..levels`.
    pub fn zeros(lattice: &BrownianLattice, dim: usize, levels: usize) -> Self {
        Self {
            dim,
            levels: (0..levels)
                .map(|i| vec![DVector::zeros(dim); lattice.node_count(i)])
                .collect(),
        }
    }

    pub fn from_fn(
        lattice: &BrownianLattice,
        dim: usize,
        levels: usize,
        mut f: impl FnMut(usize, usize) -> DVector<f64>,
    ) -> Self {
        Self {
            dim,
            levels: (0..levels)
                .map(|i| (0..lattice.node_count(i)).map(|j| f(i, j)).collect())
                .collect(),
        }
    }

    /// Node values drawn i.i.d. uniform on `[−amplitude, amplitude]`.
    pub fn random(
        lattice: &BrownianLattice,
        dim: usize,
        levels: usize,
        amplitude: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::from_fn(lattice, dim, levels, |_, _| {
            DVector::from_fn(dim, |_, _| amplitude * rng.random_range(-1.0..=1.0))
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covered_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &[DVector<f64>] {
        &self.levels[i]
    }

    pub fn level_mut(&mut self, i: usize) -> &mut Vec<DVector<f64>> {
        &mut self.levels[i]
    }

    pub fn get(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.levels[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: DVector<f64>) {
        debug_assert_eq!(value.len(), self.dim);
        self.levels[i][j] = value;
    }

    /// Conditional expectation `E[X_{i+1} | node]`.
    pub fn expect_next(&self, lattice: &BrownianLattice, i: usize, j: usize) -> Result<DVector<f64>> {
        self.check_has_next(i)?;
        Ok(lattice.mean_children(&self.levels[i + 1], j))
    }

    /// Integrand `z` of the one-step martingale representation of `X_{i+1}`.
    pub fn extract_martingale(
        &self,
        lattice: &BrownianLattice,
        i: usize,
        j: usize,
    ) -> Result<DVector<f64>> {
        self.check_has_next(i)?;
        if lattice.dt() <= 0.0 {
            return Err(Error::Lattice("dt must be positive".into()));
        }
        Ok(lattice.martingale_part(&self.levels[i + 1], j))
    }

    fn check_has_next(&self, i: usize) -> Result<()> {
        if i + 1 >= self.levels.len() {
            return Err(Error::Lattice(format!(
                "level {i} is the last covered level; it has no children"
            )));
        }
        Ok(())
    }

    pub fn expectation(
        &self,
        lattice: &BrownianLattice,
        i: usize,
        f: impl Fn(&DVector<f64>) -> f64,
    ) -> f64 {
        let vals: Vec<f64> = self.levels[i].iter().map(f).collect();
        lattice.expectation_of(i, &vals)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>) -> Self {
        debug_assert!(self.same_shape(other));
        Self {
            dim: self.dim,
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(x, y)).collect())
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Self {
        Self {
            dim: self.dim,
            levels: self
                .levels
                .iter()
                .map(|lvl| lvl.iter().map(&f).collect())
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|a| a * factor)
    }

    /// `self + factor · other`.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Self {
        self.zip_map(other, |a, b| a + b * factor)
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flatten()
            .map(|v| v.amax())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.iter().all(|&x| x == 0.0))
    }

    /// Truncated copy covering levels `0..levels`.
    pub fn truncated(&self, levels: usize) -> Self {
        Self {
            dim: self.dim,
            levels: self.levels[..levels].to_vec(),
        }
    }
}

/// `Λ = (k, y, z)`: adjoint `k` and state `y` on levels `0..=N`, `z` on `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleProcess {
    pub k: AdaptedProcess,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
}

impl TripleProcess {
    pub fn zeros(lattice: &BrownianLattice, dim: usize) -> Self {
        let n = lattice.steps();
        Self {
            k: AdaptedProcess::zeros(lattice, dim, n + 1),
            y: AdaptedProcess::zeros(lattice, dim, n + 1),
            z: AdaptedProcess::zeros(lattice, dim, n),
        }
    }

    pub fn random(lattice: &BrownianLattice, dim: usize, amplitude: f64, rng: &mut impl Rng) -> Self {
        let n = lattice.steps();
        Self {
            k: AdaptedProcess::random(lattice, dim, n + 1, amplitude, rng),
            y: AdaptedProcess::random(lattice, dim, n + 1, amplitude, rng),
            z: AdaptedProcess::random(lattice, dim, n, amplitude, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.y.dim()
    }

    pub fn check_shape(&self, lattice: &BrownianLattice) -> Result<()> {
        let n = lattice.steps();
        check_dim("k levels", n + 1, self.k.covered_levels())?;
        check_dim("y levels", n + 1, self.y.covered_levels())?;
        check_dim("z levels", n, self.z.covered_levels())?;
        check_dim("k dim", self.y.dim(), self.k.dim())?;
        check_dim("z dim", self.y.dim(), self.z.dim())?;
        for i in 0..=n {
            check_dim("k nodes", lattice.node_count(i), self.k.level(i).len())?;
            check_dim("y nodes", lattice.node_count(i), self.y.level(i).len())?;
            if i < n {
                check_dim("z nodes", lattice.node_count(i), self.z.level(i).len())?;
            }
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            k: self.k.sub(&other.k),
            y: self.y.sub(&other.y),
            z: self.z.sub(&other.z),
        }
    }

    pub fn add_scaled(&self, other: &Self, factor: f64) -> Self {
        Self {
            k: self.k.add_scaled(&other.k, factor),
            y: self.y.add_scaled(&other.y, factor),
            z: self.z.add_scaled(&other.z, factor),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            k: self.k.scale(factor),
            y: self.y.scale(factor),
            z: self.z.scale(factor),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.k.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.k.max_abs().max(self.y.max_abs()).max(self.z.max_abs())
    }
}

/// `E Σ_{i<N} dt (‖k_i‖²_V + ‖y_i‖²_V + ‖z_i‖²_H)`, left-endpoint rule.
pub fn m2_norm_sq(lam: &TripleProcess, lattice: &BrownianLattice, triple: &GelfandTriple) -> Result<f64> {
    lam.check_shape(lattice)?;
    check_dim("triple vs process", triple.dim(), lam.dim())?;
    let dt = lattice.dt();
    let mut total = 0.0;
    for i in 0..lattice.steps() {
        let vals: Vec<f64> = (0..lattice.node_count(i))
            .map(|j| {
                triple.norm_v_sq_unchecked(lam.k.get(i, j))
                    + triple.norm_v_sq_unchecked(lam.y.get(i, j))
                    + triple.norm_h_sq(lam.z.get(i, j))
            })
            .collect();
        total += dt * lattice.expectation_of(i, &vals);
    }
    Ok(total)
}

pub fn m2_distance(
    a: &TripleProcess,
    b: &TripleProcess,
    lattice: &BrownianLattice,
    triple: &GelfandTriple,
) -> Result<f64> {
    Ok(m2_norm_sq(&a.sub(b), lattice, triple)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(t: f64, n: usize) -> BrownianLattice {
        BrownianLattice::tree(TimeGrid::new(t, n).unwrap()).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::new(2.0, 7).unwrap();
        assert!((g.dt() * 7.0 - 2.0).abs() <= 1e-14 * 2.0);
        assert_eq!(g.time(7), 2.0);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn tree_moments_are_exact() {
        let lat = tree(1.0, 8);
        for i in 0..=8 {
            let w = &lat.w[i];
            assert_eq!(lat.expectation_of(i, &vec![1.0; w.len()]), 1.0);
            let mean = lat.expectation_of(i, w);
            let sq: Vec<f64> = w.iter().map(|x| x * x).collect();
            assert!(mean.abs() < 1e-15);
            assert!((lat.expectation_of(i, &sq) - lat.grid().time(i)).abs() < 1e-14);
        }
    }

    #[test]
    fn tree_cap_is_enforced() {
        let err = BrownianLattice::tree(TimeGrid::new(1.0, 20).unwrap()).unwrap_err();
        assert!(err.to_string().contains("N <= 16"));
    }

    #[test]
    fn expect_next_examples() {
        let lat = tree(1.0, 1);
        let mut p = AdaptedProcess::zeros(&lat, 1, 2);
        p.set(1, 0, dvector![2.0]);
        p.set(1, 1, dvector![4.0]);
        assert_eq!(p.expect_next(&lat, 0, 0).unwrap(), dvector![3.0]);
        p.set(1, 0, dvector![5.0]);
        p.set(1, 1, dvector![5.0]);
        assert_eq!(p.expect_next(&lat, 0, 0).unwrap(), dvector![5.0]);
        let mut q = AdaptedProcess::zeros(&lat, 2, 2);
        q.set(1, 0, dvector![1.0, 0.0]);
        q.set(1, 1, dvector![0.0, 1.0]);
        assert_eq!(q.expect_next(&lat, 0, 0).unwrap(), dvector![0.5, 0.5]);
        assert!(q.expect_next(&lat, 1, 0).is_err());
    }

    #[test]
    fn martingale_examples() {
        let lat = tree(0.5, 2);
        // dt = 0.25, √dt = 0.5.
        let mut p = AdaptedProcess::zeros(&lat, 1, 3);
        p.set(1, 0, dvector![3.0]);
        p.set(1, 1, dvector![1.0]);
        assert_eq!(p.extract_martingale(&lat, 0, 0).unwrap(), dvector![2.0]);
        let c = AdaptedProcess::from_fn(&lat, 1, 3, |_, _| dvector![7.0]);
        assert_eq!(c.extract_martingale(&lat, 1, 1).unwrap(), dvector![0.0]);
        assert!(c.extract_martingale(&lat, 2, 0).is_err());
    }

    #[test]
    fn affine_payoff_is_reconstructed() {
        let lat = tree(1.0, 3);
        let (a, b) = (0.7, -1.3);
        let p = AdaptedProcess::from_fn(&lat, 1, 4, |i, j| dvector![a + b * lat.w(i, j)]);
        for j in 0..4 {
            let z = p.extract_martingale(&lat, 2, j).unwrap();
            assert!((z[0] - b).abs() < 1e-14);
            let mean = p.expect_next(&lat, 2, j).unwrap();
            for c in lat.children(j) {
                let rebuilt = mean[0] + z[0] * lat.increment(c);
                assert!((rebuilt - p.get(3, c)[0]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let lat = tree(1.0, 4);
        let p = AdaptedProcess::from_fn(&lat, 1, 5, |i, j| dvector![lat.w(i, j)]);
        assert_eq!(p.expectation(&lat, 2, |_| 1.0), 1.0);
        assert_eq!(p.expectation(&lat, 1, |v| v[0]), 0.0);
        assert!((p.expectation(&lat, 3, |v| v[0] * v[0]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn m2_norm_examples() {
        let lat = tree(1.0, 3);
        let t = GelfandTriple::identity(1);
        assert_eq!(m2_norm_sq(&TripleProcess::zeros(&lat, 1), &lat, &t).unwrap(), 0.0);
        let mut lam = TripleProcess::zeros(&lat, 1);
        lam.k = lam.k.map(|_| dvector![1.0]);
        assert!((m2_norm_sq(&lam, &lat, &t).unwrap() - 1.0).abs() < 1e-14);

        let lat = tree(2.0, 4);
        let lam = TripleProcess {
            k: AdaptedProcess::from_fn(&lat, 1, 5, |_, _| dvector![1.0]),
            y: AdaptedProcess::from_fn(&lat, 1, 5, |_, _| dvector![2.0]),
            z: AdaptedProcess::from_fn(&lat, 1, 4, |_, _| dvector![3.0]),
        };
        assert!((m2_norm_sq(&lam, &lat, &t).unwrap() - 28.0).abs() < 1e-12);
        let det = BrownianLattice::deterministic(TimeGrid::new(2.0, 4).unwrap()).unwrap();
        let lam_det = TripleProcess {
            k: AdaptedProcess::from_fn(&det, 1, 5, |_, _| dvector![1.0]),
            y: AdaptedProcess::from_fn(&det, 1, 5, |_, _| dvector![2.0]),
            z: AdaptedProcess::from_fn(&det, 1, 4, |_, _| dvector![3.0]),
        };
        assert!((m2_norm_sq(&lam_det, &det, &t).unwrap() - m2_norm_sq(&lam, &lat, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_chain_shape() {
        let det = BrownianLattice::deterministic(TimeGrid::new(1.0, 4).unwrap()).unwrap();
        assert_eq!((0..5).map(|i| det.node_count(i)).collect::<Vec<_>>(), vec![1; 5]);
        let p = AdaptedProcess::from_fn(&det, 1, 5, |i, _| dvector![i as f64]);
        assert_eq!(p.expect_next(&det, 2, 0).unwrap(), dvector![3.0]);
        assert_eq!(p.extract_martingale(&det, 2, 0).unwrap(), dvector![0.0]);
        assert_eq!(p.expectation(&det, 3, |v| v[0] * 10.0), 30.0);
    }

    proptest! {
        #[test]
        fn tower_property_is_exact(seed in any::<u64>(), n in 1usize..7, level_pick in 0usize..6) {
            let lat = tree(1.3, n);
            let i = level_pick % n;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AdaptedProcess::random(&lat, 1, n + 1, 5.0, &mut rng);
            let cond: Vec<f64> = (0..lat.node_count(i))
                .map(|j| p.expect_next(&lat, i, j).unwrap()[0])
                .collect();
            let lhs = lat.expectation_of(i, &cond);
            let rhs = p.expectation(&lat, i + 1, |v| v[0]);
            prop_assert_eq!(lhs, rhs);
        }
    }
}
