//! Box-constrained minimization: a projected limited-memory quasi-Newton
//! method for general objectives and a bounded Levenberg-Marquardt method for
//! sum-of-squares objectives, plus single-shooting transcription of
//! estimation windows.

mod lbfgs;
mod lm;
pub mod shooting;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::linalg::Matrix;
use crate::model::Vector;

pub use lbfgs::minimize_lbfgs;
pub use lm::minimize_lm;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("objective is not finite at the initial point")]
    NonFiniteStart,
    #[error("non-finite evaluation at component {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

impl SolverStatus {
    pub fn is_converged(self) -> bool {
        self == SolverStatus::Converged
    }
}

impl fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverStatus::Converged => "converged",
            SolverStatus::MaxIterations => "max-iterations",
            SolverStatus::LineSearchFailure => "line-search-failure",
        })
    }
}

pub type ObjectiveFn<'a> = dyn Fn(&Vector) -> f64 + Sync + 'a;
pub type ResidualFn<'a> = dyn Fn(&Vector) -> Vector + Sync + 'a;
pub type JacobianFn<'a> = dyn Fn(&Vector) -> (Vector, Matrix) + Sync + 'a;

/// Sum-of-squares form `objective(x) = ‖r(x)‖²`.
pub struct LeastSquares<'a> {
    pub residual: Box<ResidualFn<'a>>,
    /// Residual together with its Jacobian; finite differences when absent.
    pub jacobian: Option<Box<JacobianFn<'a>>>,
}

/// `min objective(x)` subject to `lower ≤ x ≤ upper`. Infinite bounds mark
/// free coordinates.
pub struct NlpProblem<'a> {
    pub dim: usize,
    pub objective: Box<ObjectiveFn<'a>>,
    pub least_squares: Option<LeastSquares<'a>>,
    pub lower: Vector,
    pub upper: Vector,
    /// Typical magnitude of each coordinate; used for finite-difference steps
    /// and variable scaling.
    pub scaling: Option<Vector>,
}

impl<'a> NlpProblem<'a> {
    pub fn new(dim: usize, objective: impl Fn(&Vector) -> f64 + Sync + 'a) -> Self {
        Self {
            dim,
            objective: Box::new(objective),
            least_squares: None,
            lower: Vector::from_element(dim, f64::NEG_INFINITY),
            upper: Vector::from_element(dim, f64::INFINITY),
            scaling: None,
        }
    }

    /// A sum-of-squares problem; the objective is `‖r‖²`.
    pub fn least_squares(dim: usize, residual: impl Fn(&Vector) -> Vector + Sync + Clone + 'a) -> Self {
        let r2 = residual.clone();
        Self {
            dim,
            objective: Box::new(move |x| r2(x).norm_squared()),
            least_squares: Some(LeastSquares {
                residual: Box::new(residual),
                jacobian: None,
            }),
            lower: Vector::from_element(dim, f64::NEG_INFINITY),
            upper: Vector::from_element(dim, f64::INFINITY),
            scaling: None,
        }
    }

    pub fn with_bounds(mut self, lower: Vector, upper: Vector) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_scaling(mut self, s: Vector) -> Self {
        self.scaling = Some(s);
        self
    }

    pub fn with_jacobian(mut self, j: impl Fn(&Vector) -> (Vector, Matrix) + Sync + 'a) -> Self {
        if let Some(ls) = self.least_squares.as_mut() {
            ls.jacobian = Some(Box::new(j));
        }
        self
    }

    pub fn project(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            self.dim,
            (0..self.dim).map(|i| x[i].clamp(self.lower[i], self.upper[i])),
        )
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        (self.objective)(x)
    }

    fn scale(&self) -> Vector {
        self.scaling.clone().unwrap_or_else(|| Vector::from_element(self.dim, 1.0))
    }

    fn validate(&self) -> Result<(), SolverError> {
        if self.lower.len() != self.dim || self.upper.len() != self.dim {
            return Err(SolverError::Dimension("bounds do not match the problem dimension".into()));
        }
        if (0..self.dim).any(|i| !(self.lower[i] <= self.upper[i])) {
            return Err(SolverError::Argument("lower bound exceeds upper bound".into()));
        }
        if let Some(s) = &self.scaling {
            if s.len() != self.dim || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(SolverError::Argument("scaling must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Levenberg-Marquardt when a sum-of-squares form is available.
    Auto,
    Lbfgs,
    LevenbergMarquardt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub method: Method,
    pub max_iterations: usize,
    /// Bound on the infinity norm of the projected gradient.
    pub tol: f64,
    /// Relative step below which an accepted iterate counts as converged.
    pub xtol: f64,
    /// Relative cost decrease below which an accepted iterate counts as
    /// converged.
    pub ftol: f64,
    /// Sum-of-squares cost at or below which the problem counts as solved.
    pub cost_floor: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: Method::Auto,
            max_iterations: 500,
            tol: 1e-8,
            xtol: 1e-12,
            ftol: 1e-14,
            cost_floor: 0.0,
            fd_step: 1e-6,
            memory: 10,
        }
    }
}

impl SolverOptions {
    pub fn from_config(cfg: &KvConfig, prefix: &str) -> Result<Self, ConfigError> {
        let d = Self::default();
        let k = |s: &str| format!("{prefix}.{s}");
        let method = match cfg.get_opt_str(&k("method")) {
            None | Some("auto") => Method::Auto,
            Some("lbfgs") => Method::Lbfgs,
            Some("lm") => Method::LevenbergMarquardt,
            Some(s) => {
                return Err(ConfigError::Invalid {
                    key: k("method"),
                    msg: format!("unknown method `{s}` (auto, lbfgs, lm)"),
                })
            }
        };
        Ok(Self {
            method,
            max_iterations: cfg.get_usize_or(&k("max_iterations"), d.max_iterations)?,
            tol: cfg.get_f64_or(&k("tol"), d.tol)?,
            xtol: cfg.get_f64_or(&k("xtol"), d.xtol)?,
            ftol: cfg.get_f64_or(&k("ftol"), d.ftol)?,
            cost_floor: cfg.get_f64_or(&k("cost_floor"), d.cost_floor)?,
            fd_step: cfg.get_f64_or(&k("fd_step"), d.fd_step)?,
            memory: cfg.get_usize_or(&k("memory"), d.memory)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub argmin: Vector,
    pub cost: f64,
    pub projected_gradient_norm: f64,
    pub iterations: usize,
    pub status: SolverStatus,
}

/// Minimizes `p` from `x_init` (projected onto the box first).
///
/// The returned cost never exceeds the cost at the projected start.
pub fn solve_box_nlp(p: &NlpProblem, x_init: &Vector, opts: &SolverOptions) -> Result<Solution, SolverError> {
    p.validate()?;
    if x_init.len() != p.dim {
        return Err(SolverError::Dimension(format!("start has {} entries, problem has {}", x_init.len(), p.dim)));
    }
    let x0 = p.project(x_init);
    if !p.eval(&x0).is_finite() {
        return Err(SolverError::NonFiniteStart);
    }
    match (opts.method, &p.least_squares) {
        (Method::Lbfgs, _) | (Method::Auto, None) => minimize_lbfgs(p, &x0, opts),
        (_, Some(ls)) => minimize_lm(p, ls, &x0, opts),
        (Method::LevenbergMarquardt, None) => {
            Err(SolverError::Argument("Levenberg-Marquardt needs a sum-of-squares problem".into()))
        }
    }
}

/// Central-difference gradient with component step `h·max(1, |x_i|)`.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Result<Vector, SolverError> {
    let mut g = Vector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let hi = h * x[i].abs().max(1.0);
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SolverError::NonFinite { index: i });
        }
        g[i] = (fp - fm) / (2.0 * hi);
    }
    Ok(g)
}

/// Central-difference gradient with explicit per-component steps, falling back
/// to a one-sided difference at box bounds.
pub(crate) fn fd_gradient_steps(p: &NlpProblem, x: &Vector, steps: &Vector) -> Result<Vector, SolverError> {
    let mut g = Vector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = steps[i];
        let up = (x[i] + h).min(p.upper[i]);
        let dn = (x[i] - h).max(p.lower[i]);
        xp[i] = up;
        let fp = p.eval(&xp);
        xp[i] = dn;
        let fm = p.eval(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SolverError::NonFinite { index: i });
        }
        g[i] = if up > dn { (fp - fm) / (up - dn) } else { 0.0 };
    }
    Ok(g)
}

/// Central-difference Jacobian of a vector map.
pub fn fd_jacobian(r: impl Fn(&Vector) -> Vector, x: &Vector, steps: &Vector) -> (Vector, Matrix) {
    let r0 = r(x);
    let mut j = Matrix::zeros(r0.len(), x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = steps[i];
        xp[i] = x[i] + h;
        let rp = r(&xp);
        xp[i] = x[i] - h;
        let rm = r(&xp);
        xp[i] = x[i];
        j.set_column(i, &((rp - rm) / (2.0 * h)));
    }
    (r0, j)
}

/// `P(x − g) − x`, the projected-gradient step.
pub(crate) fn projected_gradient(p: &NlpProblem, x: &Vector, g: &Vector) -> Vector {
    p.project(&(x - g)) - x
}
