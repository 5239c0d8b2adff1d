//! TOML experiment configs: schema, validation, and problem assembly.
//!
//! The schema is documented in `docs/config.md`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::continuation::ContinuationConfig;
use crate::control::{lq_problem, ControlProblem, LqSpec};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::lattice::{BrownianLattice, LatticeMode, TimeGrid};
use crate::parabolic::{Dependence, Field, ParabolicProblem};

/// Time-step cap in tree mode (the tree has `2^N` leaves).
pub const TREE_STEP_CAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemKind {
    #[serde(rename = "lq-abstract")]
    LqAbstract,
    #[serde(rename = "parabolic-1d")]
    Parabolic1d,
    #[serde(rename = "parabolic-2d")]
    Parabolic2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Assumptions,
    Optimality,
    Contraction,
    Duality,
    Oracle,
    Convergence,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Assumptions,
        Suite::Optimality,
        Suite::Contraction,
        Suite::Duality,
        Suite::Oracle,
        Suite::Convergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Assumptions => "assumptions",
            Suite::Optimality => "optimality",
            Suite::Contraction => "contraction",
            Suite::Duality => "duality",
            Suite::Oracle => "oracle",
            Suite::Convergence => "convergence",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Which control the pipeline evaluates: the continuation optimum, or the
/// zero control (uncontrolled state only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlChoice {
    #[default]
    Optimal,
    Zero,
}

/// Analytic references the runner can compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Unit scalar LQ: `y(t) = c e^{t−T}`, `u = y`, `J = c²`.
    ScalarLq,
    /// Heat decay `e^{−π² T/2} sin(π x)`.
    HeatDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Entries(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprSpec {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprList {
    One(ExprSpec),
    Many(Vec<ExprSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqSection {
    pub dim: usize,
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub d: MatrixSpec,
    pub g: VectorSpec,
    pub xi0: VectorSpec,
    pub xi1: VectorSpec,
    pub m: MatrixSpec,
    pub q: MatrixSpec,
    pub n: MatrixSpec,
    pub h: MatrixSpec,
    pub perturbation: f64,
    pub monotonicity_c: Option<f64>,
    pub lambda: f64,
}

impl Default for LqSection {
    fn default() -> Self {
        Self {
            dim: 1,
            a: MatrixSpec::Scalar(0.0),
            b: MatrixSpec::Scalar(0.0),
            d: MatrixSpec::Scalar(1.0),
            g: VectorSpec::Scalar(0.0),
            xi0: VectorSpec::Scalar(1.0),
            xi1: VectorSpec::Scalar(0.0),
            m: MatrixSpec::Scalar(1.0),
            q: MatrixSpec::Scalar(1.0),
            n: MatrixSpec::Scalar(1.0),
            h: MatrixSpec::Scalar(1.0),
            perturbation: 0.0,
            monotonicity_c: None,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParabolicSection {
    pub mesh_n: usize,
    pub a: ExprList,
    pub b: ExprList,
    pub c: ExprSpec,
    pub nu: ExprSpec,
    pub g: ExprSpec,
    pub xi: ExprSpec,
    pub kappa: f64,
    pub bound_k: f64,
}

impl Default for ParabolicSection {
    fn default() -> Self {
        Self {
            mesh_n: 16,
            a: ExprList::One(ExprSpec::Number(0.5)),
            b: ExprList::One(ExprSpec::Number(0.0)),
            c: ExprSpec::Number(0.0),
            nu: ExprSpec::Number(0.0),
            g: ExprSpec::Number(0.0),
            xi: ExprSpec::Text("sin(pi * x)".into()),
            kappa: 1.0,
            bound_k: 1.0,
        }
    }
}

/// Sample sizes of the check suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub assumption_probes: usize,
    pub perturbation_directions: usize,
    pub perturbation_eps: f64,
    pub gradient_controls: usize,
    pub contraction_pairs: usize,
    pub warm_starts: usize,
    pub weak_test_functions: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            assumption_probes: 64,
            perturbation_directions: 50,
            perturbation_eps: 1e-3,
            gradient_controls: 5,
            contraction_pairs: 20,
            warm_starts: 5,
            weak_test_functions: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    /// Refinement levels: time steps for LQ problems, mesh sizes for
    /// parabolic ones.
    pub levels: Vec<usize>,
    /// Time steps used at every mesh level of a parabolic sweep.
    pub fine_steps: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self {
            levels: Vec::new(),
            fine_steps: 16384,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemKind,
    pub mode: LatticeMode,
    pub steps: usize,
    #[serde(default = "unit_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub control: ControlChoice,
    #[serde(default)]
    pub checks: Vec<Suite>,
    #[serde(default)]
    pub reference: Option<Reference>,
    #[serde(default)]
    pub lq: Option<LqSection>,
    #[serde(default)]
    pub parabolic: Option<ParabolicSection>,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub probes: ProbeSection,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn unit_horizon() -> f64 {
    1.0
}

fn config_error(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn matrix(field: &str, spec: &MatrixSpec, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    match spec {
        MatrixSpec::Scalar(v) if rows == cols => Ok(DMatrix::identity(rows, cols) * *v),
        MatrixSpec::Scalar(_) => Err(config_error(field, "a scalar only specifies a square matrix")),
        MatrixSpec::Rows(r) => {
            if r.len() != rows || r.iter().any(|row| row.len() != cols) {
                return Err(config_error(field, format!("expected a {rows}x{cols} matrix")));
            }
            Ok(DMatrix::from_fn(rows, cols, |i, j| r[i][j]))
        }
    }
}

fn vector(field: &str, spec: &VectorSpec, len: usize) -> Result<DVector<f64>> {
    match spec {
        VectorSpec::Scalar(v) => Ok(DVector::from_element(len, *v)),
        VectorSpec::Entries(e) if e.len() == len => Ok(DVector::from_column_slice(e)),
        VectorSpec::Entries(e) => Err(config_error(field, format!("expected {len} entries, got {}", e.len()))),
    }
}

fn parse_expr(field: &str, spec: &ExprSpec) -> Result<Expr> {
    match spec {
        ExprSpec::Number(v) => Ok(Expr::constant(*v)),
        ExprSpec::Text(s) => Expr::parse(field, s),
    }
}

fn parse_list(field: &str, spec: &ExprList, len: usize) -> Result<Vec<Expr>> {
    let items: Vec<&ExprSpec> = match spec {
        ExprList::One(e) => vec![e; len],
        ExprList::Many(v) => v.iter().collect(),
    };
    if items.len() != len {
        return Err(config_error(field, format!("expected {len} expressions, got {}", items.len())));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, e)| parse_expr(&format!("{field}[{i}]"), e))
        .collect()
}

/// Parsed coefficient expressions of a parabolic section.
#[derive(Debug, Clone)]
pub struct ParabolicExprs {
    pub a: Vec<Expr>,
    pub b: Vec<Expr>,
    pub c: Expr,
    pub nu: Expr,
    pub g: Expr,
    pub xi: Expr,
}

impl ParabolicExprs {
    fn all(&self) -> impl Iterator<Item = &Expr> {
        self.a.iter().chain(&self.b).chain([&self.c, &self.nu, &self.g, &self.xi])
    }
}

fn to_field(e: &Expr) -> Field {
    let e = e.clone();
    std::sync::Arc::new(move |t, w, x: &[f64]| e.eval(t, w, x))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".into());
            config_error(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::from_toml(&text)
    }

    pub fn space_dim(&self) -> usize {
        match self.problem {
            ProblemKind::Parabolic2d => 2,
            _ => 1,
        }
    }

    pub fn is_parabolic(&self) -> bool {
        self.problem != ProblemKind::LqAbstract
    }

    pub fn lq_spec(&self) -> Result<LqSpec> {
        let s = self
            .lq
            .as_ref()
            .ok_or_else(|| config_error("lq", "lq-abstract problems need an [lq] section"))?;
        let n = s.dim;
        if n == 0 {
            return Err(config_error("lq.dim", "must be positive"));
        }
        let a = matrix("lq.a", &s.a, n, n)?;
        let m = match &s.d {
            MatrixSpec::Rows(r) => r.first().map_or(0, |row| row.len()),
            MatrixSpec::Scalar(_) => n,
        };
        if m == 0 {
            return Err(config_error("lq.d", "control dimension must be positive"));
        }
        Ok(LqSpec {
            mode: self.mode,
            horizon: self.horizon,
            steps: self.steps,
            a,
            b: matrix("lq.b", &s.b, n, n)?,
            d: matrix("lq.d", &s.d, n, m)?,
            g: vector("lq.g", &s.g, n)?,
            xi0: vector("lq.xi0", &s.xi0, n)?,
            xi1: vector("lq.xi1", &s.xi1, n)?,
            m: matrix("lq.m", &s.m, n, n)?,
            q: matrix("lq.q", &s.q, n, n)?,
            n: matrix("lq.n", &s.n, m, m)?,
            h: matrix("lq.h", &s.h, n, n)?,
            perturbation: s.perturbation,
            monotonicity_c: s.monotonicity_c,
            lambda: s.lambda,
        })
    }

    pub fn parabolic_exprs(&self) -> Result<ParabolicExprs> {
        let s = self
            .parabolic
            .as_ref()
            .ok_or_else(|| config_error("parabolic", "parabolic problems need a [parabolic] section"))?;
        let d = self.space_dim();
        Ok(ParabolicExprs {
            a: parse_list("parabolic.a", &s.a, d * (d + 1) / 2)?,
            b: parse_list("parabolic.b", &s.b, d)?,
            c: parse_expr("parabolic.c", &s.c)?,
            nu: parse_expr("parabolic.nu", &s.nu)?,
            g: parse_expr("parabolic.g", &s.g)?,
            xi: parse_expr("parabolic.xi", &s.xi)?,
        })
    }

    pub fn parabolic_problem(&self) -> Result<ParabolicProblem> {
        let s = self
            .parabolic
            .as_ref()
            .ok_or_else(|| config_error("parabolic", "parabolic problems need a [parabolic] section"))?;
        let e = self.parabolic_exprs()?;
        let dependence = Dependence {
            time: e.all().any(Expr::uses_time),
            noise: e.all().any(Expr::uses_noise),
        };
        let xi = e.xi.clone();
        let horizon = self.horizon;
        Ok(ParabolicProblem {
            space_dim: self.space_dim(),
            mesh_n: s.mesh_n,
            a: e.a.iter().map(to_field).collect(),
            b: e.b.iter().map(to_field).collect(),
            c: to_field(&e.c),
            nu: to_field(&e.nu),
            g: to_field(&e.g),
            xi: std::sync::Arc::new(move |w, x: &[f64]| xi.eval(horizon, w, x)),
            kappa: s.kappa,
            bound_k: s.bound_k,
            dependence,
        })
    }

    pub fn lattice(&self) -> Result<BrownianLattice> {
        BrownianLattice::new(TimeGrid::new(self.horizon, self.steps)?, self.mode)
    }

    /// Assembles the discretized control problem.
    pub fn build_problem(&self) -> Result<ControlProblem> {
        match self.problem {
            ProblemKind::LqAbstract => lq_problem(&self.lq_spec()?),
            _ => crate::parabolic::assemble(&self.parabolic_problem()?, self.lattice()?),
        }
    }

    /// Copy of the config at one refinement level of a convergence sweep.
    pub fn at_level(&self, level: usize) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.is_parabolic() {
            if let Some(p) = cfg.parabolic.as_mut() {
                p.mesh_n = level;
            }
            cfg.steps = cfg.convergence.fine_steps;
        } else {
            cfg.steps = level;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_error("steps", "must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_error("horizon", "must be positive and finite"));
        }
        if self.mode == LatticeMode::Tree && self.steps > TREE_STEP_CAP {
            return Err(config_error(
                "steps",
                format!("tree mode is capped at N <= {TREE_STEP_CAP}, got {}", self.steps),
            ));
        }
        self.continuation.validate()?;
        let p = &self.probes;
        if !(p.perturbation_eps > 0.0 && p.perturbation_eps.is_finite()) {
            return Err(config_error("probes.perturbation_eps", "must be positive"));
        }
        if self.convergence.fine_steps == 0 {
            return Err(config_error("convergence.fine_steps", "must be positive"));
        }
        match self.problem {
            ProblemKind::LqAbstract => self.validate_lq()?,
            _ => self.validate_parabolic()?,
        }
        self.validate_reference()
    }

    fn validate_lq(&self) -> Result<()> {
        if self.parabolic.is_some() {
            return Err(config_error("parabolic", "not allowed for lq-abstract problems"));
        }
        let spec = self.lq_spec()?;
        if self.mode == LatticeMode::Deterministic {
            if spec.b.iter().any(|v| *v != 0.0) {
                return Err(config_error("lq.b", "deterministic mode needs B = 0"));
            }
            if spec.xi1.iter().any(|v| *v != 0.0) {
                return Err(config_error("lq.xi1", "deterministic mode needs deterministic data (xi1 = 0)"));
            }
        }
        if let Some(c) = spec.monotonicity_c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_error("lq.monotonicity_c", "must be positive"));
            }
        }
        Ok(())
    }

    fn validate_parabolic(&self) -> Result<()> {
        if self.lq.is_some() {
            return Err(config_error("lq", "not allowed for parabolic problems"));
        }
        let s = self
            .parabolic
            .as_ref()
            .ok_or_else(|| config_error("parabolic", "parabolic problems need a [parabolic] section"))?;
        if s.mesh_n < 2 {
            return Err(config_error("parabolic.mesh_n", "needs at least 2 interior points per axis"));
        }
        if !(s.kappa > 0.0 && s.bound_k >= s.kappa && s.bound_k.is_finite()) {
            return Err(config_error("parabolic.kappa", "need 0 < kappa <= bound_k"));
        }
        if self.problem == ProblemKind::Parabolic2d && self.mode == LatticeMode::Tree {
            return Err(config_error("mode", "parabolic-2d runs in deterministic mode only"));
        }
        let e = self.parabolic_exprs()?;
        if self.mode == LatticeMode::Deterministic {
            if !e.nu.is_zero() {
                return Err(config_error("parabolic.nu", "deterministic mode needs nu = 0"));
            }
            if let Some(x) = e.all().find(|x| x.uses_noise()) {
                return Err(config_error(
                    "parabolic",
                    format!("deterministic mode needs deterministic data, '{x}' reads W"),
                ));
            }
        }
        Ok(())
    }

    fn validate_reference(&self) -> Result<()> {
        match self.reference {
            None => Ok(()),
            Some(Reference::ScalarLq) => {
                let bad = || {
                    config_error(
                        "reference",
                        "scalar-lq needs a deterministic scalar lq-abstract problem with A = B = G = 0, \
                         D = M = Q = N = h = 1 and no perturbation",
                    )
                };
                if self.problem != ProblemKind::LqAbstract || self.mode != LatticeMode::Deterministic {
                    return Err(bad());
                }
                let s = self.lq_spec()?;
                let one = |m: &DMatrix<f64>| m.shape() == (1, 1) && m[(0, 0)] == 1.0;
                let zero = |m: &DMatrix<f64>| m.iter().all(|v| *v == 0.0);
                if !(one(&s.d) && one(&s.m) && one(&s.q) && one(&s.n) && one(&s.h))
                    || !(zero(&s.a) && zero(&s.b))
                    || s.g.iter().any(|v| *v != 0.0)
                    || s.perturbation != 0.0
                {
                    return Err(bad());
                }
                if self.control != ControlChoice::Optimal {
                    return Err(config_error("control", "scalar-lq reference needs the optimal control"));
                }
                Ok(())
            }
            Some(Reference::HeatDecay) => {
                let bad = || {
                    config_error(
                        "reference",
                        "heat-decay needs a deterministic parabolic-1d problem with a = 0.5, \
                         b = c = nu = g = 0, xi = sin(pi x) and the zero control",
                    )
                };
                if self.problem != ProblemKind::Parabolic1d
                    || self.mode != LatticeMode::Deterministic
                    || self.control != ControlChoice::Zero
                {
                    return Err(bad());
                }
                let e = self.parabolic_exprs()?;
                for k in 0..=8 {
                    let x = [k as f64 / 8.0];
                    let t = self.horizon * k as f64 / 8.0;
                    let xi = (std::f64::consts::PI * x[0]).sin();
                    let ok = (e.a[0].eval(t, 0.0, &x) - 0.5).abs() < 1e-14
                        && e.b[0].eval(t, 0.0, &x) == 0.0
                        && e.c.eval(t, 0.0, &x) == 0.0
                        && e.g.eval(t, 0.0, &x) == 0.0
                        && (e.xi.eval(self.horizon, 0.0, &x) - xi).abs() < 1e-14;
                    if !ok {
                        return Err(bad());
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LQ: &str = r#"
name = "unit"
problem = "lq-abstract"
mode = "deterministic"
steps = 16
reference = "scalar-lq"
checks = ["optimality"]

[lq]
"#;

    #[test]
    fn parses_minimal_lq_config() {
        let cfg = ExperimentConfig::from_toml(LQ).unwrap();
        assert_eq!(cfg.steps, 16);
        assert_eq!(cfg.checks, vec![Suite::Optimality]);
        let spec = cfg.lq_spec().unwrap();
        assert_eq!(spec.d[(0, 0)], 1.0);
        assert_eq!(spec.xi0[0], 1.0);
        cfg.build_problem().unwrap();
    }

    #[test]
    fn tree_cap_is_named() {
        let text = LQ.replace("deterministic", "tree").replace("steps = 16", "steps = 20").replace("reference = \"scalar-lq\"", "");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "steps");
                assert!(message.contains("16"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_and_bad_values_are_located() {
        let err = ExperimentConfig::from_toml(&format!("{LQ}bogus = 1\n")).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field.starts_with("line")), "{err}");
        let err = ExperimentConfig::from_toml(&LQ.replace("steps = 16", "steps = \"x\"")).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "line 5"), "{err}");
    }

    #[test]
    fn deterministic_mode_rejects_noise() {
        let text = LQ.replace("reference = \"scalar-lq\"", "") + "b = 0.5\n";
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "lq.b"));

        let text = r#"
name = "p"
problem = "parabolic-1d"
mode = "deterministic"
steps = 8
[parabolic]
mesh_n = 4
a = "0.5 + 0.1 * sin(W)"
kappa = 0.5
"#;
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("reads W"), "{err}");
    }

    #[test]
    fn reference_preconditions() {
        let text = LQ.replace("[lq]", "[lq]\nn = 2.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let heat = r#"
name = "heat"
problem = "parabolic-1d"
mode = "deterministic"
steps = 8
horizon = 0.1
control = "zero"
reference = "heat-decay"
[parabolic]
mesh_n = 4
"#;
        ExperimentConfig::from_toml(heat).unwrap();
        assert!(ExperimentConfig::from_toml(&heat.replace("mesh_n = 4", "mesh_n = 4\nc = 1")).is_err());
    }

    #[test]
    fn parabolic_dependence_and_levels() {
        let text = r#"
name = "p"
problem = "parabolic-1d"
mode = "tree"
steps = 3
[parabolic]
mesh_n = 4
nu = "0.2 * (1 + 0.5 * sin(W))"
g = "x * t"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let p = cfg.parabolic_problem().unwrap();
        assert!(p.dependence.noise && p.dependence.time);
        // Parabolic sweeps run at the fine step count, beyond the tree cap.
        assert!(cfg.at_level(8).is_err());
        let det = ExperimentConfig::from_toml(&text.replace("tree", "deterministic").replace("nu = \"0.2 * (1 + 0.5 * sin(W))\"", "")).unwrap();
        let lvl = det.at_level(8).unwrap();
        assert_eq!(lvl.parabolic.unwrap().mesh_n, 8);
        assert_eq!(lvl.steps, 16384);
    }

    #[test]
    fn matrix_specs() {
        let m = matrix("f", &MatrixSpec::Rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]), 2, 2).unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert!(matrix("f", &MatrixSpec::Scalar(1.0), 2, 1).is_err());
        assert!(vector("f", &VectorSpec::Entries(vec![1.0]), 2).is_err());
    }
}
