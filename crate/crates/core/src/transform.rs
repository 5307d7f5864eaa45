//! State transforms `z = T(x) = (z♭, z♯)` that split off the part of the state
//! reachable by the unknown input, and the w-free reduced model in `z♯`.

use std::fmt;
use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{condition_number, full_svd, left_null_rows, pinv, rank, Matrix, DEFAULT_RANK_RTOL};
use crate::model::{BoxDomain, InputDomain, SystemModel, Vector};

pub type MapFn = dyn Fn(&Vector) -> Vector + Send + Sync;
/// `ψ(y, z♯, v) -> z♭`.
pub type PsiFn = dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("rank condition fails: rank(CB) = {rank_cb} but rank(B) = {rank_b}; the system is not strongly detectable")]
    RankCondition { rank_b: usize, rank_cb: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("transform matrix is singular or ill-posed: {0}")]
    Singular(String),
    #[error("sharp rows do not annihilate the input direction: max |T♯B| = {0:e}")]
    NotDecoupling(f64),
    #[error("reduced dynamics depend on w (|d/dw| = {derivative:e}) at x = {x:?}, w = {w:?}")]
    WDependence { x: Vec<f64>, w: Vec<f64>, derivative: f64 },
    #[error("state domain required for this operation")]
    NoDomain,
}

/// A diffeomorphism `φ` with its inverse.
#[derive(Clone)]
pub struct Diffeomorphism {
    pub forward: Arc<MapFn>,
    pub inverse: Arc<MapFn>,
}

impl Diffeomorphism {
    pub fn new(
        forward: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        inverse: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
        }
    }
}

/// Coordinate transform with output inversion map `ψ`.
#[derive(Clone)]
pub struct StateTransform {
    n_flat: usize,
    n_sharp: usize,
    forward: Arc<MapFn>,
    inverse: Arc<MapFn>,
    psi: Arc<PsiFn>,
    /// `col(S♭C, M)` when the transform is linear in `φ(x)`.
    matrix: Option<Matrix>,
    phi_is_identity: bool,
    state_domain: Option<BoxDomain>,
    domain_image: Option<BoxDomain>,
}

impl fmt::Debug for StateTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateTransform")
            .field("n_flat", &self.n_flat)
            .field("n_sharp", &self.n_sharp)
            .field("matrix", &self.matrix)
            .field("domain_image", &self.domain_image)
            .finish()
    }
}

impl StateTransform {
    /// A fully custom transform. `forward` returns `col(z♭, z♯)`.
    pub fn custom(
        n_flat: usize,
        n_sharp: usize,
        forward: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        inverse: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        psi: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_flat,
            n_sharp,
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
            psi: Arc::new(psi),
            matrix: None,
            phi_is_identity: false,
            state_domain: None,
            domain_image: None,
        }
    }

    /// `T(x) = T_mat φ(x)` with `ψ(y, z♯, v) = S♭(y − g(v))`, where `S♭` solves
    /// `S♭C = T♭`. Checks that `T♯B = 0`, that `T♭` lies in the row space of
    /// `C` and that `T_mat` is invertible.
    pub fn from_linear(
        t: Matrix,
        n_flat: usize,
        c: &Matrix,
        b: &Matrix,
        g: Arc<MapFn>,
        phi: Option<Diffeomorphism>,
    ) -> Result<Self, TransformError> {
        let n = t.nrows();
        if t.ncols() != n || c.ncols() != n || b.nrows() != n || n_flat > n {
            return Err(TransformError::Dimension(format!(
                "T {}x{}, C {}x{}, B {}x{}, n_flat {n_flat}",
                t.nrows(),
                t.ncols(),
                c.nrows(),
                c.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let t_flat = t.rows(0, n_flat).into_owned();
        let t_sharp = t.rows(n_flat, n - n_flat).into_owned();
        let tb = &t_sharp * b;
        let leak = tb.abs().max();
        let scale = t_sharp.abs().max() * b.abs().max();
        if tb.len() > 0 && leak > 1e-12 * scale.max(1.0) {
            return Err(TransformError::NotDecoupling(leak));
        }
        let s_flat = &t_flat * pinv(c, None);
        let resid = (&s_flat * c - &t_flat).abs().max();
        if t_flat.len() > 0 && resid > 1e-10 * t_flat.abs().max() {
            return Err(TransformError::Singular(format!(
                "flat rows are not a combination of output rows (residual {resid:e})"
            )));
        }
        Self::assemble(t, n_flat, s_flat, g, phi)
    }

    fn assemble(
        t: Matrix,
        n_flat: usize,
        s_flat: Matrix,
        g: Arc<MapFn>,
        phi: Option<Diffeomorphism>,
    ) -> Result<Self, TransformError> {
        let n = t.nrows();
        let cond = condition_number(&t);
        if !cond.is_finite() || cond > 1e12 {
            return Err(TransformError::Singular(format!("condition number {cond:e}")));
        }
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| TransformError::Singular("inversion failed".into()))?;
        let phi_is_identity = phi.is_none();
        let (fwd, inv): (Arc<MapFn>, Arc<MapFn>) = match phi {
            None => {
                let (t1, t2) = (t.clone(), t_inv);
                (Arc::new(move |x| &t1 * x), Arc::new(move |z| &t2 * z))
            }
            Some(p) => {
                let (t1, t2) = (t.clone(), t_inv);
                let (pf, pi) = (p.forward, p.inverse);
                (Arc::new(move |x| &t1 * pf(x)), Arc::new(move |z| pi(&(&t2 * z))))
            }
        };
        let psi: Arc<PsiFn> = Arc::new(move |y, _z, v| &s_flat * (y - g(v)));
        Ok(Self {
            n_flat,
            n_sharp: n - n_flat,
            forward: fwd,
            inverse: inv,
            psi,
            matrix: Some(t),
            phi_is_identity,
            state_domain: None,
            domain_image: None,
        })
    }

    /// Attaches the state domain `𝕏` and computes the box over-approximation of
    /// `T(𝕏)`. For a non-identity `φ`, `phi_image` must enclose `φ(𝕏)`; fully
    /// custom transforms need `image` directly.
    pub fn with_state_domain(
        mut self,
        x: &BoxDomain,
        phi_image: Option<&BoxDomain>,
        image: Option<BoxDomain>,
    ) -> Result<Self, TransformError> {
        if x.dim() != self.n_x() {
            return Err(TransformError::Dimension(format!("state box has dim {}", x.dim())));
        }
        let img = match (&self.matrix, image) {
            (_, Some(b)) => b,
            (Some(t), None) => {
                let src = if self.phi_is_identity {
                    x
                } else {
                    phi_image.ok_or(TransformError::NoDomain)?
                };
                linear_box_image(t, src)
            }
            (None, None) => return Err(TransformError::NoDomain),
        };
        self.state_domain = Some(x.clone());
        self.domain_image = Some(img);
        Ok(self)
    }

    pub fn n_flat(&self) -> usize {
        self.n_flat
    }
    pub fn n_sharp(&self) -> usize {
        self.n_sharp
    }
    pub fn n_x(&self) -> usize {
        self.n_flat + self.n_sharp
    }

    /// `T(x) = col(z♭, z♯)`.
    pub fn apply(&self, x: &Vector) -> Vector {
        (self.forward)(x)
    }

    pub fn flat(&self, x: &Vector) -> Vector {
        self.apply(x).rows(0, self.n_flat).into_owned()
    }

    pub fn sharp(&self, x: &Vector) -> Vector {
        self.apply(x).rows(self.n_flat, self.n_sharp).into_owned()
    }

    pub fn inverse(&self, z: &Vector) -> Vector {
        (self.inverse)(z)
    }

    pub fn inverse_parts(&self, z_flat: &Vector, z_sharp: &Vector) -> Vector {
        self.inverse(&join(z_flat, z_sharp))
    }

    pub fn psi(&self, y: &Vector, z_sharp: &Vector, v: &Vector) -> Vector {
        (self.psi)(y, z_sharp, v)
    }

    /// `col(S♭C, M)` for affine transforms.
    pub fn matrix(&self) -> Option<&Matrix> {
        self.matrix.as_ref()
    }

    pub fn state_domain(&self) -> Option<&BoxDomain> {
        self.state_domain.as_ref()
    }

    /// Box over-approximation of `T(𝕏)`.
    pub fn domain_image(&self) -> Option<&BoxDomain> {
        self.domain_image.as_ref()
    }

    /// The `z♯` block of [`Self::domain_image`].
    pub fn domain_sharp(&self) -> Option<BoxDomain> {
        self.domain_image.as_ref().map(|b| sub_box(b, self.n_flat, self.n_sharp))
    }

    /// Exact membership of `z` in `T(𝕏)`.
    pub fn image_contains(&self, z: &Vector) -> Option<bool> {
        self.state_domain.as_ref().map(|x| x.contains(&self.inverse(z)))
    }
}

fn join(a: &Vector, b: &Vector) -> Vector {
    Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn sub_box(b: &BoxDomain, start: usize, len: usize) -> BoxDomain {
    BoxDomain::new(
        b.lower().rows(start, len).into_owned(),
        b.upper().rows(start, len).into_owned(),
    )
    .expect("sub-box of a valid box")
}

/// Tightest box around `{T x : x ∈ box}`.
pub fn linear_box_image(t: &Matrix, b: &BoxDomain) -> BoxDomain {
    let c = b.center();
    let r = b.widths() * 0.5;
    let mid = t * c;
    let rad = t.abs() * r;
    BoxDomain::new(&mid - &rad, &mid + &rad).expect("interval image is ordered")
}

/// Builds `T♭(x) = S♭Cφ(x)`, `T♯(x) = Mφ(x)`, `ψ = S♭(y − g(v))` for a
/// quasi-state-affine system `φ(x)⁺ = f₁ + B f₂`, `y = Cφ(x) + g(v)`.
///
/// `S♭` candidates are the leading left singular vectors of `CB` and every
/// output-coordinate selector with `rank(S♭CB) = rank(B)`; `M` spans the left
/// null space of `B`. The candidate with the smallest condition number of
/// `col(S♭C, M)` wins, ties going to the earlier candidate.
pub fn build_affine_transform(
    c: &Matrix,
    b: &Matrix,
    g: Arc<MapFn>,
    phi: Option<Diffeomorphism>,
    tol: Option<f64>,
) -> Result<StateTransform, TransformError> {
    let n = b.nrows();
    if c.ncols() != n {
        return Err(TransformError::Dimension(format!("C has {} columns, B has {} rows", c.ncols(), n)));
    }
    let cb = c * b;
    let rank_b = rank(b, tol);
    let rank_cb = rank(&cb, tol);
    if rank_cb != rank_b {
        return Err(TransformError::RankCondition { rank_b, rank_cb });
    }
    let m = if rank_b == 0 {
        Matrix::identity(n, n)
    } else {
        left_null_rows(b, tol)
    };
    let p = c.nrows();
    let mut candidates: Vec<Matrix> = Vec::new();
    if rank_b == 0 {
        candidates.push(Matrix::zeros(0, p));
    } else {
        let svd = full_svd(&cb);
        candidates.push(svd.u.columns(0, rank_b).transpose());
        for sel in combinations(p, rank_b) {
            let mut s = Matrix::zeros(rank_b, p);
            for (row, &j) in sel.iter().enumerate() {
                s[(row, j)] = 1.0;
            }
            if rank(&(&s * &cb), tol) == rank_b {
                candidates.push(s);
            }
        }
    }
    let mut best: Option<(f64, Matrix, Matrix)> = None;
    for s_flat in candidates {
        let t = stack(&(&s_flat * c), &m);
        let k = condition_number(&t);
        if best.as_ref().is_none_or(|(bk, _, _)| k < *bk) {
            best = Some((k, t, s_flat));
        }
    }
    let (k, t, s_flat) = best.expect("at least one candidate");
    if !k.is_finite() {
        return Err(TransformError::Singular("col(S♭C, M) is singular".into()));
    }
    let leak = (&m * b).abs().max();
    let rel = tol.unwrap_or(DEFAULT_RANK_RTOL).max(1e-12);
    if m.nrows() > 0 && b.len() > 0 && leak > rel * b.abs().max().max(1.0) {
        return Err(TransformError::NotDecoupling(leak));
    }
    StateTransform::assemble(t, rank_b, s_flat, g, phi)
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// Sampling used by the build-time w-independence check.
#[derive(Clone, Debug)]
pub struct WCheckSpec {
    pub samples: usize,
    pub seed: u64,
    /// Where to probe `w` when the model's w-domain is unbounded; defaults to
    /// `reference ± 1`.
    pub w_probe: Option<BoxDomain>,
    pub tol: f64,
}

impl Default for WCheckSpec {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 7,
            w_probe: None,
            tol: 1e-7,
        }
    }
}

/// The w-free subsystem `z♯⁺ = f̂♯(z♯, γ, u, v)`, `y = ĥ(z♯, γ, v)`.
#[derive(Clone, Debug)]
pub struct ReducedModel {
    model: SystemModel,
    transform: Arc<StateTransform>,
    w_ref: Vector,
    domain_sharp: BoxDomain,
}

impl ReducedModel {
    pub fn n_sharp(&self) -> usize {
        self.transform.n_sharp()
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn transform(&self) -> &StateTransform {
        &self.transform
    }

    pub fn transform_arc(&self) -> Arc<StateTransform> {
        self.transform.clone()
    }

    pub fn domain_sharp(&self) -> &BoxDomain {
        &self.domain_sharp
    }

    /// Full state consistent with `(z♯, γ, v)`.
    pub fn lift(&self, z: &Vector, gamma: &Vector, v: &Vector) -> Vector {
        let zf = self.transform.psi(gamma, z, v);
        self.transform.inverse_parts(&zf, z)
    }

    pub fn f_sharp(&self, z: &Vector, gamma: &Vector, u: &Vector, v: &Vector) -> Vector {
        let x = self.lift(z, gamma, v);
        self.transform.sharp(&self.model.f(&x, u, &self.w_ref))
    }

    pub fn h_t(&self, z: &Vector, gamma: &Vector, v: &Vector) -> Vector {
        self.model.h(&self.lift(z, gamma, v), v)
    }
}

/// Derives the reduced model, spot-checking by central differences that the
/// sharp part of `f` does not depend on `w`.
pub fn reduce_model(
    model: &SystemModel,
    t: Arc<StateTransform>,
    check: &WCheckSpec,
) -> Result<ReducedModel, TransformError> {
    if t.n_x() != model.n_x() {
        return Err(TransformError::Dimension(format!(
            "transform dim {} vs model state dim {}",
            t.n_x(),
            model.n_x()
        )));
    }
    let domain_sharp = t.domain_sharp().ok_or(TransformError::NoDomain)?;
    let w_ref = model.reference_w();
    let probe = match (&model.domains().w, &check.w_probe) {
        (_, Some(b)) => b.clone(),
        (InputDomain::Bounded(b), None) => b.clone(),
        (InputDomain::Unbounded(q), None) => BoxDomain::new(
            w_ref.add_scalar(-1.0),
            w_ref.add_scalar(1.0),
        )
        .unwrap_or_else(|_| BoxDomain::point(&Vector::zeros(*q))),
    };
    let d = model.domains();
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    for _ in 0..check.samples {
        let x = sample_box(&d.x, &mut rng);
        let u = sample_box(&d.u, &mut rng);
        let w = sample_box(&probe, &mut rng);
        for i in 0..w.len() {
            let h = 1e-4 * w[i].abs().max(1.0);
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let dz = (t.sharp(&model.f(&x, &u, &wp)) - t.sharp(&model.f(&x, &u, &wm))) / (2.0 * h);
            let der = dz.amax();
            if der > check.tol {
                return Err(TransformError::WDependence {
                    x: x.iter().copied().collect(),
                    w: w.iter().copied().collect(),
                    derivative: der,
                });
            }
        }
    }
    Ok(ReducedModel {
        model: model.clone(),
        transform: t,
        w_ref,
        domain_sharp,
    })
}

/// Uniform sample from a bounded box (degenerate axes give their bound).
pub fn sample_box(b: &BoxDomain, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_iterator(
        b.dim(),
        (0..b.dim()).map(|i| {
            let (l, u) = (b.lower()[i], b.upper()[i]);
            if l < u {
                Uniform::new_inclusive(l, u).expect("ordered finite").sample(rng)
            } else {
                l
            }
        }),
    )
}

/// `x̂ = T⁻¹(col(ψ(y, z♯, v̄), z♯))`.
pub fn recover_full_state(t: &StateTransform, y: &Vector, z_sharp: &Vector, v_bar: &Vector) -> Vector {
    let zf = t.psi(y, z_sharp, v_bar);
    t.inverse_parts(&zf, z_sharp)
}

/// Projects a transformed candidate onto `domain` and maps it back.
pub fn project_estimate(t: &StateTransform, z_candidate: &Vector, domain: &BoxDomain) -> Vector {
    t.inverse(&domain.project(z_candidate))
}
