//! System abstraction `x⁺ = f(x, u, w)`, `y = h(x, v)` and trajectory simulation.
//!
//! Sequence offset convention used everywhere in the crate: for a trajectory of
//! length `K`, controls are indexed `0..K` (exclusive) while states, unknown
//! inputs, noises and outputs are indexed `0..=K`. The unknown input at index
//! `K` is recorded but never enters the dynamics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

pub type Vector = DVector<f64>;

/// Transition map `(x, u, w) -> x⁺`.
pub type TransitionFn = dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync;
/// Output map `(x, v) -> y`.
pub type OutputFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("{what} at step {step} lies outside its domain")]
    OutOfDomain { what: String, step: usize },
    #[error("non-finite value produced by {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Axis-aligned box `{x : lower <= x <= upper}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    lower: Vector,
    upper: Vector,
}

impl BoxDomain {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::DimensionMismatch {
                what: "box upper bound".into(),
                expected: lower.len(),
                found: upper.len(),
            });
        }
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(ModelError::InvalidBox(format!(
                    "component {i}: lower {} > upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self, ModelError> {
        Self::new(Vector::from_column_slice(lower), Vector::from_column_slice(upper))
    }

    /// Box `[-r, r]` in every component.
    pub fn symmetric(radius: &[f64]) -> Result<Self, ModelError> {
        let upper = Vector::from_column_slice(radius);
        Self::new(-upper.clone(), upper)
    }

    /// Degenerate box containing exactly one point.
    pub fn point(x: &Vector) -> Self {
        Self {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// Box with no bounds in any coordinate.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: Vector::from_element(dim, f64::NEG_INFINITY),
            upper: Vector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }

    pub fn upper(&self) -> &Vector {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(self.upper.iter()).all(|b| b.is_finite())
    }

    pub fn center(&self) -> Vector {
        self.lower.zip_map(&self.upper, |l, u| {
            match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => l,
                (false, true) => u,
                (false, false) => 0.0,
            }
        })
    }

    pub fn widths(&self) -> Vector {
        &self.upper - &self.lower
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.contains_with_tol(x, 0.0)
    }

    pub fn contains_with_tol(&self, x: &Vector, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol)
    }

    /// Euclidean projection, i.e. componentwise clamping.
    pub fn project(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&l, &u))| v.max(l).min(u)),
        )
    }

    /// Signed componentwise excess outside the box (zero inside).
    pub fn excess(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&l, &u))| {
                    if v > u {
                        v - u
                    } else if v < l {
                        v - l
                    } else {
                        0.0
                    }
                }),
        )
    }

    /// Grow each side by `fraction` of the corresponding width.
    pub fn inflate(&self, fraction: f64) -> Self {
        let pad = self.widths() * fraction;
        Self {
            lower: &self.lower - &pad,
            upper: &self.upper + &pad,
        }
    }

    /// Tightest box containing both.
    pub fn hull(&self, other: &BoxDomain) -> Self {
        Self {
            lower: self.lower.zip_map(&other.lower, f64::min),
            upper: self.upper.zip_map(&other.upper, f64::max),
        }
    }
}

impl fmt::Display for BoxDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for i in 0..self.dim() {
            if i > 0 {
                write!(f, " x ")?;
            }
            write!(f, "[{}, {}]", self.lower[i], self.upper[i])?;
        }
        write!(f, "]")
    }
}

/// Domain of the unknown input: a box or all of `R^q`.
#[derive(Clone, Debug, PartialEq)]
pub enum InputDomain {
    Bounded(BoxDomain),
    Unbounded(usize),
}

impl InputDomain {
    pub fn dim(&self) -> usize {
        match self {
            InputDomain::Bounded(b) => b.dim(),
            InputDomain::Unbounded(q) => *q,
        }
    }

    pub fn contains(&self, w: &Vector) -> bool {
        match self {
            InputDomain::Bounded(b) => b.contains(w),
            InputDomain::Unbounded(q) => w.len() == *q && w.iter().all(|v| v.is_finite()),
        }
    }

    pub fn as_box(&self) -> Option<&BoxDomain> {
        match self {
            InputDomain::Bounded(b) => Some(b),
            InputDomain::Unbounded(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Domains {
    pub x: BoxDomain,
    pub u: BoxDomain,
    pub w: InputDomain,
    pub v: BoxDomain,
    pub y: BoxDomain,
}

/// Black-box discrete-time system with box domains.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    f: Arc<TransitionFn>,
    h: Arc<OutputFn>,
    domains: Domains,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x())
            .field("n_u", &self.n_u())
            .field("n_w", &self.n_w())
            .field("n_v", &self.n_v())
            .field("n_y", &self.n_y())
            .finish()
    }
}

impl SystemModel {
    /// Dimensions are taken from the domains. The state, noise and output
    /// domains must be bounded.
    pub fn new<F, H>(name: impl Into<String>, f: F, h: H, domains: Domains) -> Result<Self, ModelError>
    where
        F: Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        H: Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    {
        for (what, b) in [("state", &domains.x), ("noise", &domains.v), ("output", &domains.y)] {
            if !b.is_bounded() {
                return Err(ModelError::InvalidBox(format!("{what} domain must be bounded")));
            }
        }
        Ok(Self {
            name: name.into(),
            f: Arc::new(f),
            h: Arc::new(h),
            domains,
        })
    }

    pub fn n_x(&self) -> usize {
        self.domains.x.dim()
    }
    pub fn n_u(&self) -> usize {
        self.domains.u.dim()
    }
    pub fn n_w(&self) -> usize {
        self.domains.w.dim()
    }
    pub fn n_v(&self) -> usize {
        self.domains.v.dim()
    }
    pub fn n_y(&self) -> usize {
        self.domains.y.dim()
    }

    pub fn domains(&self) -> &Domains {
        &self.domains
    }

    pub fn with_domains(mut self, domains: Domains) -> Self {
        self.domains = domains;
        self
    }

    #[inline]
    pub fn f(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        (self.f)(x, u, w)
    }

    #[inline]
    pub fn h(&self, x: &Vector, v: &Vector) -> Vector {
        (self.h)(x, v)
    }

    /// A reference unknown input: the box center, or zero when unbounded.
    pub fn reference_w(&self) -> Vector {
        match &self.domains.w {
            InputDomain::Bounded(b) => b.center(),
            InputDomain::Unbounded(q) => Vector::zeros(*q),
        }
    }
}

/// A recorded out-of-domain event during simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainWarning {
    pub step: usize,
    pub what: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub unknown_inputs: Vec<Vector>,
    pub noises: Vec<Vector>,
    pub outputs: Vec<Vector>,
    pub warnings: Vec<DomainWarning>,
}

impl Trajectory {
    /// Number of transitions `K`.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Writes one row per time index; the control column is empty at `k = K`.
    pub fn write_csv<W: Write>(&self, mut out: W, labels: &ColumnLabels) -> std::io::Result<()> {
        writeln!(out, "{}", labels.header())?;
        for k in 0..self.states.len() {
            let mut fields = vec![k.to_string()];
            fields.extend(self.states[k].iter().map(|v| fmt_f64(*v)));
            match self.controls.get(k) {
                Some(u) => fields.extend(u.iter().map(|v| fmt_f64(*v))),
                None => fields.extend(std::iter::repeat_n(String::new(), labels.u.len())),
            }
            fields.extend(self.unknown_inputs[k].iter().map(|v| fmt_f64(*v)));
            fields.extend(self.noises[k].iter().map(|v| fmt_f64(*v)));
            fields.extend(self.outputs[k].iter().map(|v| fmt_f64(*v)));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Shortest representation that round-trips through `str::parse::<f64>`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Column names for trajectory CSV files.
#[derive(Clone, Debug)]
pub struct ColumnLabels {
    pub x: Vec<String>,
    pub u: Vec<String>,
    pub w: Vec<String>,
    pub v: Vec<String>,
    pub y: Vec<String>,
}

impl ColumnLabels {
    pub fn generic(model: &SystemModel) -> Self {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        Self {
            x: names("x", model.n_x()),
            u: names("u", model.n_u()),
            w: names("w", model.n_w()),
            v: names("v", model.n_v()),
            y: names("y", model.n_y()),
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["k".to_string()];
        for group in [&self.x, &self.u, &self.w, &self.v, &self.y] {
            cols.extend(group.iter().cloned());
        }
        cols.join(",")
    }
}

fn check_dim(what: &str, v: &Vector, expected: usize) -> Result<(), ModelError> {
    if v.len() != expected {
        return Err(ModelError::DimensionMismatch {
            what: what.to_string(),
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

fn check_finite(what: &str, v: &Vector, step: usize) -> Result<(), ModelError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

/// Simulates `K = controls.len()` transitions with prescribed unknown inputs.
///
/// `unknown_inputs` and `noises` must both have `K + 1` entries.
pub fn simulate(
    model: &SystemModel,
    x0: &Vector,
    controls: &[Vector],
    unknown_inputs: &[Vector],
    noises: &[Vector],
) -> Result<Trajectory, ModelError> {
    let k_len = controls.len();
    if unknown_inputs.len() != k_len + 1 {
        return Err(ModelError::DimensionMismatch {
            what: "unknown input sequence length".into(),
            expected: k_len + 1,
            found: unknown_inputs.len(),
        });
    }
    for (k, w) in unknown_inputs.iter().enumerate() {
        check_dim("unknown input", w, model.n_w())?;
        if !model.domains.w.contains(w) {
            return Err(ModelError::OutOfDomain {
                what: "unknown input".into(),
                step: k,
            });
        }
    }
    simulate_with(model, x0, controls, |k, _| unknown_inputs[k].clone(), noises)
}

/// Simulates with the unknown input generated from the current state, as for
/// the crop model whose `w_k = W(x_k)`.
pub fn simulate_with<P>(
    model: &SystemModel,
    x0: &Vector,
    controls: &[Vector],
    mut w_policy: P,
    noises: &[Vector],
) -> Result<Trajectory, ModelError>
where
    P: FnMut(usize, &Vector) -> Vector,
{
    let k_len = controls.len();
    check_dim("initial state", x0, model.n_x())?;
    if noises.len() != k_len + 1 {
        return Err(ModelError::DimensionMismatch {
            what: "noise sequence length".into(),
            expected: k_len + 1,
            found: noises.len(),
        });
    }
    if !model.domains.x.contains(x0) {
        return Err(ModelError::OutOfDomain {
            what: "initial state".into(),
            step: 0,
        });
    }
    for (k, u) in controls.iter().enumerate() {
        check_dim("control", u, model.n_u())?;
        if !model.domains.u.contains(u) {
            return Err(ModelError::OutOfDomain {
                what: "control".into(),
                step: k,
            });
        }
    }
    for (k, v) in noises.iter().enumerate() {
        check_dim("noise", v, model.n_v())?;
        if !model.domains.v.contains(v) {
            return Err(ModelError::OutOfDomain {
                what: "noise".into(),
                step: k,
            });
        }
    }

    let mut states = Vec::with_capacity(k_len + 1);
    let mut ws = Vec::with_capacity(k_len + 1);
    let mut outputs = Vec::with_capacity(k_len + 1);
    let mut warnings = Vec::new();
    let mut x = x0.clone();
    for k in 0..=k_len {
        let w = w_policy(k, &x);
        check_dim("unknown input", &w, model.n_w())?;
        check_finite("unknown input", &w, k)?;
        let y = model.h(&x, &noises[k]);
        check_dim("output", &y, model.n_y())?;
        check_finite("output map h", &y, k)?;
        if !model.domains.y.contains(&y) {
            warnings.push(DomainWarning { step: k, what: "output" });
        }
        let next = if k < k_len {
            let xn = model.f(&x, &controls[k], &w);
            check_dim("next state", &xn, model.n_x())?;
            check_finite("transition map f", &xn, k)?;
            if !model.domains.x.contains(&xn) {
                warnings.push(DomainWarning { step: k + 1, what: "state" });
            }
            Some(xn)
        } else {
            None
        };
        states.push(x);
        ws.push(w);
        outputs.push(y);
        match next {
            Some(xn) => x = xn,
            None => break,
        }
    }

    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        unknown_inputs: ws,
        noises: noises.to_vec(),
        outputs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model() -> SystemModel {
        SystemModel::new(
            "scalar",
            |x, _u, w| Vector::from_element(1, 0.5 * x[0] + w[0]),
            |x, v| Vector::from_element(1, x[0] + v[0]),
            Domains {
                x: BoxDomain::from_slices(&[-10.0], &[10.0]).unwrap(),
                u: BoxDomain::from_slices(&[0.0], &[0.0]).unwrap(),
                w: InputDomain::Unbounded(1),
                v: BoxDomain::from_slices(&[-1.0], &[1.0]).unwrap(),
                y: BoxDomain::from_slices(&[-11.0], &[11.0]).unwrap(),
            },
        )
        .unwrap()
    }

    fn s(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    #[test]
    fn scalar_recursion_by_hand() {
        let m = scalar_model();
        let traj = simulate(&m, &s(1.0), &[s(0.0), s(0.0)], &vec![s(0.0); 3], &vec![s(0.0); 3]).unwrap();
        let xs: Vec<f64> = traj.states.iter().map(|x| x[0]).collect();
        let ys: Vec<f64> = traj.outputs.iter().map(|y| y[0]).collect();
        assert_eq!(xs, vec![1.0, 0.5, 0.25]);
        assert_eq!(ys, vec![1.0, 0.5, 0.25]);
        assert!(traj.warnings.is_empty());
    }

    #[test]
    fn empty_horizon_gives_single_sample() {
        let m = scalar_model();
        let traj = simulate(&m, &s(2.0), &[], &[s(0.0)], &[s(0.25)]).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.outputs, vec![s(2.25)]);
        assert_eq!(traj.len(), 0);
    }

    #[test]
    fn length_mismatch_is_an_argument_error() {
        let m = scalar_model();
        let err = simulate(&m, &s(1.0), &[s(0.0)], &[s(0.0)], &vec![s(0.0); 2]).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }));
        let err = simulate(&m, &Vector::zeros(2), &[], &[s(0.0)], &[s(0.0)]).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }));
    }

    #[test]
    fn leaving_the_state_domain_is_flagged_not_fatal() {
        let m = scalar_model();
        let traj = simulate(&m, &s(1.0), &[s(0.0)], &[s(20.0), s(0.0)], &vec![s(0.0); 2]).unwrap();
        assert_eq!(traj.states[1][0], 20.5);
        assert!(traj.warnings.contains(&DomainWarning { step: 1, what: "state" }));
    }

    #[test]
    fn non_finite_transition_reports_step() {
        let base = scalar_model();
        let m = SystemModel::new(
            "ratio",
            |x, _u, w| Vector::from_element(1, x[0] / w[0]),
            |x, v| Vector::from_element(1, x[0] + v[0]),
            base.domains().clone(),
        )
        .unwrap();
        let err = simulate(&m, &s(1.0), &[s(0.0), s(0.0)], &[s(1.0), s(0.0), s(1.0)], &vec![s(0.0); 3])
            .unwrap_err();
        assert_eq!(
            err,
            ModelError::NonFinite {
                what: "transition map f".into(),
                step: 1
            }
        );
    }

    #[test]
    fn box_projection_and_excess() {
        let b = BoxDomain::from_slices(&[0.0, -1.0], &[1.0, 1.0]).unwrap();
        let p = b.project(&Vector::from_vec(vec![2.0, -3.0]));
        assert_eq!(p, Vector::from_vec(vec![1.0, -1.0]));
        assert_eq!(b.excess(&Vector::from_vec(vec![2.0, 0.5])), Vector::from_vec(vec![1.0, 0.0]));
        assert!(BoxDomain::from_slices(&[1.0], &[0.0]).is_err());
    }
}
