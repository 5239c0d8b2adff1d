//! Finite-dimensional Gelfand triple `V ⊂ H ⊂ V*` and the operator families of
//! the state equation.
//!
//! Everything lives in Galerkin coordinates. The H inner product is
//! `(x, y)_H = xᵀ M y` with `M = mass_h`, the squared V norm is `xᵀ S x` with
//! `S = norm_v`. Operators such as `A` map coordinates to coordinates; the
//! pairing `⟨A x, w⟩` is evaluated as `(A x, w)_H`, so an operator's adjoint is
//! `M⁻¹ Aᵀ M`.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const EIGEN_FLOOR: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityCertificate {
    pub alpha: f64,
    pub lambda: f64,
    pub bound_c: f64,
}

#[derive(Debug, Clone)]
pub struct GelfandTriple {
    dim: usize,
    mass_h: DMatrix<f64>,
    norm_v: DMatrix<f64>,
    /// Smallest `c` with `‖x‖²_H ≤ c ‖x‖²_V`.
    embedding: f64,
    pub coercivity: Option<CoercivityCertificate>,
}

impl GelfandTriple {
    pub fn new(mass_h: DMatrix<f64>, norm_v: DMatrix<f64>) -> Result<Self> {
        let dim = mass_h.nrows();
        if dim == 0 {
            return Err(Error::Input("Galerkin dimension must be positive".into()));
        }
        check_dim("mass_h columns", dim, mass_h.ncols())?;
        check_dim("norm_v rows", dim, norm_v.nrows())?;
        check_dim("norm_v columns", dim, norm_v.ncols())?;
        check_spd("mass_h", &mass_h)?;
        check_spd("norm_v", &norm_v)?;
        let (_, embedding) = generalized_eigen_range(&mass_h, &norm_v)?;
        Ok(Self {
            dim,
            mass_h,
            norm_v,
            embedding,
            coercivity: None,
        })
    }

    /// `V = H = V* = ℝⁿ` with Euclidean structure.
    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim), DMatrix::identity(dim, dim))
            .expect("identity triple is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mass_h(&self) -> &DMatrix<f64> {
        &self.mass_h
    }

    pub fn norm_v(&self) -> &DMatrix<f64> {
        &self.norm_v
    }

    pub fn embedding_constant(&self) -> f64 {
        self.embedding
    }

    pub fn inner_h(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_dim("inner_h lhs", self.dim, x.len())?;
        check_dim("inner_h rhs", self.dim, y.len())?;
        Ok(self.inner_h_unchecked(x, y))
    }

    pub(crate) fn inner_h_unchecked(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        bilinear(&self.mass_h, x, y)
    }

    pub fn norm_h_sq(&self, x: &DVector<f64>) -> f64 {
        bilinear(&self.mass_h, x, x).max(0.0)
    }

    pub fn norm_v_sq(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("norm_v_sq", self.dim, x.len())?;
        Ok(self.norm_v_sq_unchecked(x))
    }

    pub(crate) fn norm_v_sq_unchecked(&self, x: &DVector<f64>) -> f64 {
        bilinear(&self.norm_v, x, x).max(0.0)
    }

    /// H-adjoint `M⁻¹ Aᵀ M` of a square operator.
    pub fn h_adjoint(&self, op: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        adjoint_between(op, &self.mass_h, &self.mass_h)
    }

    pub fn with_coercivity(mut self, cert: CoercivityCertificate) -> Self {
        self.coercivity = Some(cert);
        self
    }
}

fn bilinear(m: &DMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let yj = y[j];
        if yj == 0.0 {
            continue;
        }
        let mut col = 0.0;
        for i in 0..n {
            col += x[i] * m[(i, j)];
        }
        acc += col * yj;
    }
    acc
}

/// Adjoint of `op: domain → range` with respect to the inner products given
/// by `mass_domain` and `mass_range`: `mass_domain⁻¹ opᵀ mass_range`.
pub fn adjoint_between(
    op: &DMatrix<f64>,
    mass_domain: &DMatrix<f64>,
    mass_range: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dim("adjoint domain", mass_domain.nrows(), op.ncols())?;
    check_dim("adjoint range", mass_range.nrows(), op.nrows())?;
    let rhs = op.transpose() * mass_range;
    if is_diagonal(mass_domain) {
        let mut out = rhs;
        for i in 0..out.nrows() {
            let d = mass_domain[(i, i)];
            if d == 0.0 {
                return Err(Error::Singular {
                    level: 0,
                    node: None,
                });
            }
            out.row_mut(i).scale_mut(1.0 / d);
        }
        return Ok(out);
    }
    mass_domain
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular {
            level: 0,
            node: None,
        })
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

pub(crate) fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    check_finite(name, m)?;
    if !is_symmetric(m) {
        return Err(Error::NotSpd(name.to_string()));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotSpd(name.to_string()));
    }
    Ok(())
}

pub(crate) fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues of the symmetric pencil `(s, spd)`.
pub fn generalized_eigen_range(s: &DMatrix<f64>, spd: &DMatrix<f64>) -> Result<(f64, f64)> {
    let chol = spd
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("generalized eigenproblem weight".into()))?;
    let l = chol.l();
    let linv_s = l
        .solve_lower_triangular(s)
        .ok_or_else(|| Error::NotSpd("generalized eigenproblem weight".into()))?;
    let c = l
        .solve_lower_triangular(&linv_s.transpose())
        .ok_or_else(|| Error::NotSpd("generalized eigenproblem weight".into()))?;
    let eig = symmetric_part(&c).symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// Largest α with `⟨A x, x⟩ + λ‖x‖²_H ≥ α‖x‖²_V` over all samples.
pub fn certify_coercivity(
    samples: &[DMatrix<f64>],
    triple: &GelfandTriple,
    lambda: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("certify_coercivity needs at least one sample".into()));
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite("coercivity shift".into()));
    }
    let mut alpha = f64::INFINITY;
    for (idx, a) in samples.iter().enumerate() {
        check_dim("coercivity sample", triple.dim, a.nrows())?;
        check_finite(&format!("coercivity sample {idx}"), a)?;
        let form = symmetric_part(&(triple.mass_h() * a)) + triple.mass_h() * lambda;
        let (min, _) = generalized_eigen_range(&form, triple.norm_v())?;
        alpha = alpha.min(min);
    }
    if alpha <= 0.0 {
        return Err(Error::Coercivity { alpha });
    }
    Ok(alpha)
}

/// `sup |⟨A x, w⟩| / (‖x‖_V ‖w‖_V)` over the samples.
pub fn operator_bound_v(samples: &[DMatrix<f64>], triple: &GelfandTriple) -> Result<f64> {
    let chol = triple
        .norm_v()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("norm_v".into()))?;
    let l = chol.l();
    let mut bound: f64 = 0.0;
    for a in samples {
        let pairing = triple.mass_h() * a;
        let left = l.solve_lower_triangular(&pairing).ok_or(Error::Singular {
            level: 0,
            node: None,
        })?;
        let both = l
            .solve_lower_triangular(&left.transpose())
            .ok_or(Error::Singular {
                level: 0,
                node: None,
            })?;
        let sv = both.singular_values();
        bound = bound.max(sv.iter().cloned().fold(0.0, f64::max));
    }
    Ok(bound)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

type MatrixFn = dyn Fn(usize, f64) -> DMatrix<f64> + Send + Sync;
type VectorFn = dyn Fn(usize, f64) -> DVector<f64> + Send + Sync;

/// A matrix-valued coefficient indexed by time level and the Brownian value
/// `W(t_i)` at a lattice node.
#[derive(Clone)]
pub enum MatrixFamily {
    Constant(DMatrix<f64>),
    PerTime(Arc<Vec<DMatrix<f64>>>),
    Random(Arc<MatrixFn>),
}

impl fmt::Debug for MatrixFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            Self::PerTime(v) => write!(f, "PerTime(len {})", v.len()),
            Self::Random(_) => write!(f, "Random(..)"),
        }
    }
}

impl MatrixFamily {
    pub fn random(f: impl Fn(usize, f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self::Random(Arc::new(f))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn at(&self, level: usize, w: f64) -> Cow<'_, DMatrix<f64>> {
        match self {
            Self::Constant(m) => Cow::Borrowed(m),
            Self::PerTime(v) => Cow::Borrowed(&v[level.min(v.len() - 1)]),
            Self::Random(f) => Cow::Owned(f(level, w)),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::Random(_))
    }

    /// True when the family is identically zero (only decidable for
    /// deterministic families).
    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant(m) => m.iter().all(|&v| v == 0.0),
            Self::PerTime(v) => v.iter().all(|m| m.iter().all(|&x| x == 0.0)),
            Self::Random(_) => false,
        }
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        match self {
            Self::Constant(m) => Self::Constant(f(m)),
            Self::PerTime(v) => Self::PerTime(Arc::new(v.iter().map(&f).collect())),
            Self::Random(g) => {
                let g = Arc::clone(g);
                Self::random(move |i, w| f(&g(i, w)))
            }
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        let m = self.at(0, 0.0);
        (m.nrows(), m.ncols())
    }
}

/// A vector-valued coefficient indexed like [`MatrixFamily`].
#[derive(Clone)]
pub enum VectorFamily {
    Constant(DVector<f64>),
    PerTime(Arc<Vec<DVector<f64>>>),
    Random(Arc<VectorFn>),
}

impl fmt::Debug for VectorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(v) => write!(f, "Constant({})", v.len()),
            Self::PerTime(v) => write!(f, "PerTime(len {})", v.len()),
            Self::Random(_) => write!(f, "Random(..)"),
        }
    }
}

impl VectorFamily {
    pub fn random(f: impl Fn(usize, f64) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self::Random(Arc::new(f))
    }

    pub fn zeros(n: usize) -> Self {
        Self::Constant(DVector::zeros(n))
    }

    pub fn at(&self, level: usize, w: f64) -> Cow<'_, DVector<f64>> {
        match self {
            Self::Constant(v) => Cow::Borrowed(v),
            Self::PerTime(v) => Cow::Borrowed(&v[level.min(v.len() - 1)]),
            Self::Random(f) => Cow::Owned(f(level, w)),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::Random(_))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant(v) => v.iter().all(|&x| x == 0.0),
            Self::PerTime(v) => v.iter().all(|m| m.iter().all(|&x| x == 0.0)),
            Self::Random(_) => false,
        }
    }

    pub fn len(&self) -> usize {
        self.at(0, 0.0).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Self::Constant(v) => Self::Constant(v * factor),
            Self::PerTime(v) => Self::PerTime(Arc::new(v.iter().map(|x| x * factor).collect())),
            Self::Random(g) => {
                let g = Arc::clone(g);
                Self::random(move |i, w| g(i, w) * factor)
            }
        }
    }
}

/// Coefficients `(A, B, D, G, ξ)` of the state equation together with their
/// adjoints once [`build_adjoints`] has run.
#[derive(Debug, Clone)]
pub struct EvolutionCoefficients {
    pub a: MatrixFamily,
    pub b: MatrixFamily,
    pub d: MatrixFamily,
    pub g: VectorFamily,
    /// Terminal datum, evaluated at the last level with the node's `W(T)`.
    pub xi: VectorFamily,
    /// Inner product on the control space `U`.
    pub mass_u: DMatrix<f64>,
    /// Shift λ used when certifying coercivity of `A`.
    pub lambda: f64,
    /// Declared uniform bounds on `B` and `D` (spectral norm).
    pub b_bound: Option<f64>,
    pub d_bound: Option<f64>,
    pub adjoint_a: Option<MatrixFamily>,
    pub adjoint_b: Option<MatrixFamily>,
    pub adjoint_d: Option<MatrixFamily>,
}

impl EvolutionCoefficients {
    pub fn new(
        a: MatrixFamily,
        b: MatrixFamily,
        d: MatrixFamily,
        g: VectorFamily,
        xi: VectorFamily,
    ) -> Result<Self> {
        let (n, nc) = a.shape();
        check_dim("A columns", n, nc)?;
        check_dim("B rows", n, b.shape().0)?;
        check_dim("B columns", n, b.shape().1)?;
        let (dr, m) = d.shape();
        check_dim("D rows", n, dr)?;
        check_dim("G length", n, g.len())?;
        check_dim("xi length", n, xi.len())?;
        Ok(Self {
            a,
            b,
            d,
            g,
            xi,
            mass_u: DMatrix::identity(m, m),
            lambda: 0.0,
            b_bound: None,
            d_bound: None,
            adjoint_a: None,
            adjoint_b: None,
            adjoint_d: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape().0
    }

    pub fn control_dim(&self) -> usize {
        self.d.shape().1
    }

    pub fn with_control_mass(mut self, mass_u: DMatrix<f64>) -> Result<Self> {
        check_dim("control mass", self.control_dim(), mass_u.nrows())?;
        check_spd("mass_u", &mass_u)?;
        self.mass_u = mass_u;
        self.adjoint_d = None;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_bounds(mut self, b_bound: Option<f64>, d_bound: Option<f64>) -> Self {
        self.b_bound = b_bound;
        self.d_bound = d_bound;
        self
    }

    pub fn has_adjoints(&self) -> bool {
        self.adjoint_a.is_some() && self.adjoint_b.is_some() && self.adjoint_d.is_some()
    }

    /// True when every coefficient and the terminal datum are deterministic and
    /// `B ≡ 0`, i.e. the state carries no martingale part.
    pub fn is_deterministic(&self) -> bool {
        self.a.is_deterministic()
            && self.b.is_zero()
            && self.d.is_deterministic()
            && self.g.is_deterministic()
            && self.xi.is_deterministic()
    }
}

/// Fills in `A*`, `B*` (H-adjoints) and `D*` (adjoint from `H` to `U`).
pub fn build_adjoints(
    coeffs: &EvolutionCoefficients,
    triple: &GelfandTriple,
) -> Result<EvolutionCoefficients> {
    check_dim("coefficients vs triple", triple.dim(), coeffs.state_dim())?;
    let m_h = triple.mass_h().clone();
    let m_u = coeffs.mass_u.clone();
    // Fail early on singular masses; the closures below then cannot fail.
    adjoint_between(&coeffs.a.at(0, 0.0), &m_h, &m_h)?;
    adjoint_between(&coeffs.d.at(0, 0.0), &m_u, &m_h)?;
    let adj = |mh: DMatrix<f64>, mr: DMatrix<f64>| {
        move |op: &DMatrix<f64>| adjoint_between(op, &mh, &mr).expect("mass checked above")
    };
    let mut out = coeffs.clone();
    out.adjoint_a = Some(coeffs.a.map(adj(m_h.clone(), m_h.clone())));
    out.adjoint_b = Some(coeffs.b.map(adj(m_h.clone(), m_h.clone())));
    out.adjoint_d = Some(coeffs.d.map(adj(m_u, m_h)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn laplacian(n: usize, h: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 / (h * h)
            } else if i.abs_diff(j) == 1 {
                -1.0 / (h * h)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn inner_h_examples() {
        let t = GelfandTriple::identity(2);
        assert_eq!(t.inner_h(&dvector![1.0, 0.0], &dvector![0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(t.inner_h(&dvector![1.0, 1.0], &dvector![1.0, 1.0]).unwrap(), 2.0);
        let t1 = GelfandTriple::new(dmatrix![0.5], dmatrix![1.0]).unwrap();
        assert_eq!(t1.inner_h(&dvector![2.0], &dvector![3.0]).unwrap(), 3.0);
        assert!(matches!(
            t.inner_h(&dvector![1.0], &dvector![1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn norm_v_examples() {
        let t = GelfandTriple::identity(2);
        assert_eq!(t.norm_v_sq(&dvector![0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(t.norm_v_sq(&dvector![3.0, 4.0]).unwrap(), 25.0);
        // H¹ norm of the middle hat function on (0,1), h = 1/4.
        let h = 0.25;
        let mass = DMatrix::identity(3, 3) * h;
        let stiff = laplacian(3, h) * h;
        let t = GelfandTriple::new(mass.clone(), &mass + &stiff).unwrap();
        let x = dvector![0.0, 1.0, 0.0];
        // Lumped L² part h·1 plus gradient part h·((1/h)² + (1/h)²).
        let expected = h + h * 2.0 / (h * h);
        assert_relative_eq!(t.norm_v_sq(&x).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn rejects_non_spd() {
        assert!(GelfandTriple::new(dmatrix![1.0, 2.0; 0.0, 1.0], DMatrix::identity(2, 2)).is_err());
        assert!(GelfandTriple::new(DMatrix::identity(2, 2), dmatrix![1.0, 0.0; 0.0, 0.0]).is_err());
    }

    #[test]
    fn coercivity_examples() {
        let t = GelfandTriple::new(DMatrix::identity(2, 2), dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let alpha = certify_coercivity(&[t.norm_v().clone()], &t, 0.0).unwrap();
        assert_relative_eq!(alpha, 1.0, max_relative = 1e-12);

        let t1 = GelfandTriple::identity(1);
        let alpha = certify_coercivity(&[dmatrix![-1.0]], &t1, 2.0).unwrap();
        assert_relative_eq!(alpha, 1.0, max_relative = 1e-12);
        assert!(matches!(
            certify_coercivity(&[dmatrix![-1.0]], &t1, 0.5),
            Err(Error::Coercivity { .. })
        ));
        assert!(certify_coercivity(&[dmatrix![f64::NAN]], &t1, 0.5).is_err());
        assert!(certify_coercivity(&[], &t1, 0.5).is_err());
    }

    #[test]
    fn coercivity_of_fd_laplacian_matches_closed_form_spectrum() {
        let n = 7;
        let h = 1.0 / (n as f64 + 1.0);
        let stiffness = laplacian(n, h);
        let mass = DMatrix::identity(n, n) * h;
        let t = GelfandTriple::new(mass.clone(), &mass + &stiffness * h).unwrap();
        let a = &stiffness * 0.5;
        let alpha = certify_coercivity(&[a], &t, 0.0).unwrap();
        // The pencil (½hS, h(I+S)) shares eigenvectors with S; its eigenvalues
        // are ½s/(1+s) for the stencil eigenvalues s = 4/h² sin²(kπh/2).
        let oracle = (1..=n)
            .map(|k| {
                let s = 4.0 / (h * h) * (k as f64 * std::f64::consts::PI * h / 2.0).sin().powi(2);
                0.5 * s / (1.0 + s)
            })
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(alpha, oracle, max_relative = 1e-10);
    }

    #[test]
    fn coercivity_is_monotone_in_lambda() {
        let t = GelfandTriple::identity(3);
        let a = dmatrix![1.0, 2.0, 0.0; -1.0, 0.5, 0.3; 0.0, 0.0, -0.2];
        let a1 = certify_coercivity(std::slice::from_ref(&a), &t, 1.0).unwrap();
        let a2 = certify_coercivity(&[a], &t, 1.5).unwrap();
        assert!(a1 <= a2);
    }

    fn coeffs_with_a(a: DMatrix<f64>) -> EvolutionCoefficients {
        let n = a.nrows();
        EvolutionCoefficients::new(
            MatrixFamily::Constant(a),
            MatrixFamily::zeros(n, n),
            MatrixFamily::Constant(DMatrix::identity(n, n)),
            VectorFamily::zeros(n),
            VectorFamily::zeros(n),
        )
        .unwrap()
    }

    #[test]
    fn adjoint_examples() {
        let t = GelfandTriple::identity(2);
        let sym = dmatrix![1.0, 2.0; 2.0, 3.0];
        let c = build_adjoints(&coeffs_with_a(sym.clone()), &t).unwrap();
        assert_eq!(*c.adjoint_a.unwrap().at(0, 0.0), sym);

        let a = dmatrix![0.0, 1.0; 0.0, 0.0];
        let c = build_adjoints(&coeffs_with_a(a.clone()), &t).unwrap();
        assert_eq!(*c.adjoint_a.unwrap().at(0, 0.0), dmatrix![0.0, 0.0; 1.0, 0.0]);

        let t = GelfandTriple::new(dmatrix![1.0, 0.0; 0.0, 2.0], DMatrix::identity(2, 2)).unwrap();
        let c = build_adjoints(&coeffs_with_a(a.clone()), &t).unwrap();
        let adj = c.adjoint_a.unwrap().at(0, 0.0).into_owned();
        // M⁻¹ Aᵀ M = diag(1, ½)·[[0,0],[1,0]]·diag(1,2) = [[0,0],[½,0]]
        assert_eq!(adj, dmatrix![0.0, 0.0; 0.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let lhs = t.inner_h(&(&a * &x), &y).unwrap();
            let rhs = t.inner_h(&x, &(&adj * &y)).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn adjoint_is_an_involution() {
        let mass = dmatrix![2.0, 0.3; 0.3, 1.0];
        let t = GelfandTriple::new(mass, DMatrix::identity(2, 2)).unwrap();
        let a = dmatrix![0.4, -1.2; 2.5, 0.1];
        let once = t.h_adjoint(&a).unwrap();
        let twice = t.h_adjoint(&once).unwrap();
        assert!((twice - a).amax() < 1e-12);
    }

    #[test]
    fn control_adjoint_uses_both_masses() {
        let t = GelfandTriple::new(dmatrix![3.0], dmatrix![3.0]).unwrap();
        let c = EvolutionCoefficients::new(
            MatrixFamily::Constant(dmatrix![1.0]),
            MatrixFamily::zeros(1, 1),
            MatrixFamily::Constant(dmatrix![2.0]),
            VectorFamily::zeros(1),
            VectorFamily::zeros(1),
        )
        .unwrap()
        .with_control_mass(dmatrix![0.5])
        .unwrap();
        let c = build_adjoints(&c, &t).unwrap();
        // (D u, k)_H = 3·2·u·k must equal (u, D* k)_U = 0.5·u·D*k.
        assert_relative_eq!(c.adjoint_d.unwrap().at(0, 0.0)[(0, 0)], 12.0);
    }

    #[test]
    fn random_family_sees_level_and_w() {
        let fam = MatrixFamily::random(|i, w| dmatrix![i as f64 + w]);
        assert_eq!(fam.at(3, 0.5)[(0, 0)], 3.5);
        assert!(!fam.is_deterministic());
        let mapped = fam.map(|m| m * 2.0);
        assert_eq!(mapped.at(1, 1.0)[(0, 0)], 4.0);
    }
}
