//! Detectability certificates and their checks: the quadratic dissipation
//! inequality for strong detectability, the linear rank/Schur test, the
//! exponential i-IOSS bound on reduced models and the minimal horizons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::linalg::{range_basis, rank, spectral_radius, Matrix};
use crate::model::{BoxDomain, InputDomain, SystemModel, Vector};
use crate::transform::{sample_box, ReducedModel};

/// Cap on the horizon search.
pub const HORIZON_CAP: usize = 1_000_000;
/// Relative slack below which a violation is attributed to rounding.
pub const VIOLATION_RTOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("rank(CB) = {rank_cb} exceeds rank(B) = {rank_b}; tolerance too small")]
    Tolerance { rank_b: usize, rank_cb: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Quadratic storage `V = ΔxᵀPΔx` with scaled-square bounds and gains.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovCertificate {
    pub p: Matrix,
    pub mu: f64,
    pub a1: f64,
    pub a2: f64,
    pub s_v: f64,
    pub s_y: f64,
}

impl LyapunovCertificate {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::InvalidCertificate(m));
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad(format!("mu = {} not in (0, 1)", self.mu));
        }
        if !self.p.is_square() {
            return bad("P must be square".into());
        }
        let asym = (&self.p - self.p.transpose()).abs().max();
        if asym > 1e-12 * self.p.abs().max().max(1.0) {
            return bad(format!("P not symmetric (max asymmetry {asym:e})"));
        }
        let eig = self.p.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) {
            return bad(format!("P not positive definite (min eigenvalue {lo:e})"));
        }
        let slack = 1e-12 * hi;
        if !(self.a1 > 0.0 && self.a1 <= lo + slack && hi <= self.a2 + slack) {
            return bad(format!(
                "need 0 < a1 <= lambda_min(P) = {lo:e} and lambda_max(P) = {hi:e} <= a2; got a1 = {:e}, a2 = {:e}",
                self.a1, self.a2
            ));
        }
        if !(self.s_v >= 0.0 && self.s_y >= 0.0) {
            return bad("gains must be nonnegative".into());
        }
        Ok(())
    }

    pub fn storage(&self, dx: &Vector) -> f64 {
        dx.dot(&(&self.p * dx))
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn write_config(&self, cfg: &mut KvConfig, prefix: &str) {
        cfg.set_matrix(format!("{prefix}.p"), &self.p);
        cfg.set_f64(format!("{prefix}.mu"), self.mu);
        cfg.set_f64(format!("{prefix}.a1"), self.a1);
        cfg.set_f64(format!("{prefix}.a2"), self.a2);
        cfg.set_f64(format!("{prefix}.s_v"), self.s_v);
        cfg.set_f64(format!("{prefix}.s_y"), self.s_y);
    }

    pub fn from_config(cfg: &KvConfig, prefix: &str) -> Result<Self, DetectError> {
        let c = Self {
            p: cfg.get_matrix(&format!("{prefix}.p"))?,
            mu: cfg.get_f64(&format!("{prefix}.mu"))?,
            a1: cfg.get_f64(&format!("{prefix}.a1"))?,
            a2: cfg.get_f64(&format!("{prefix}.a2"))?,
            s_v: cfg.get_f64(&format!("{prefix}.s_v"))?,
            s_y: cfg.get_f64(&format!("{prefix}.s_y"))?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Exponential-quadratic i-IOSS gains for a reduced model.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpIossCertificate {
    pub mu: f64,
    pub c_x: f64,
    pub c_v: f64,
    pub c_y: f64,
    pub c_gamma: f64,
}

impl ExpIossCertificate {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(DetectError::InvalidCertificate(format!("mu = {} not in (0, 1)", self.mu)));
        }
        if !(self.c_v >= 0.0 && self.c_y >= 0.0 && self.c_gamma >= 0.0) {
            return Err(DetectError::InvalidCertificate("gains must be nonnegative".into()));
        }
        if !(self.c_x >= 1.0) {
            return Err(DetectError::InvalidCertificate(format!("c_x = {} must be >= 1", self.c_x)));
        }
        Ok(())
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn write_config(&self, cfg: &mut KvConfig, prefix: &str) {
        cfg.set_f64(format!("{prefix}.mu"), self.mu);
        cfg.set_f64(format!("{prefix}.c_x"), self.c_x);
        cfg.set_f64(format!("{prefix}.c_v"), self.c_v);
        cfg.set_f64(format!("{prefix}.c_y"), self.c_y);
        cfg.set_f64(format!("{prefix}.c_gamma"), self.c_gamma);
    }

    pub fn from_config(cfg: &KvConfig, prefix: &str) -> Result<Self, DetectError> {
        let c = Self {
            mu: cfg.get_f64(&format!("{prefix}.mu"))?,
            c_x: cfg.get_f64(&format!("{prefix}.c_x"))?,
            c_v: cfg.get_f64(&format!("{prefix}.c_v"))?,
            c_y: cfg.get_f64(&format!("{prefix}.c_y"))?,
            c_gamma: cfg.get_f64_or(&format!("{prefix}.c_gamma"), 0.0)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    CertifiedOnGrid,
    Falsified,
}

/// A violating evaluation. `first`/`second` hold the concatenated arguments of
/// the two compared points or trajectories.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counterexample {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// Time index for trajectory bounds.
    pub step: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub counterexample: Option<Counterexample>,
    pub points_checked: usize,
    /// Points dropped because a successor output left the output domain.
    pub points_skipped: usize,
    /// `min(rhs − lhs)` over all checked points.
    pub worst_margin: f64,
    /// `min((rhs − lhs) / max(|lhs|, |rhs|))` over points with a nonzero side.
    pub worst_relative_margin: f64,
    /// Where the unknown input was sampled.
    pub w_scope: String,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One evaluation pair for the dissipation inequality. Both points share `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPair {
    pub x: Vector,
    pub x_tilde: Vector,
    pub u: Vector,
    pub w: Vector,
    pub w_tilde: Vector,
    pub v: Vector,
    pub v_tilde: Vector,
    pub v_next: Vector,
    pub v_next_tilde: Vector,
}

impl PointPair {
    fn first(&self) -> Vec<f64> {
        [&self.x, &self.u, &self.w, &self.v, &self.v_next]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }
    fn second(&self) -> Vec<f64> {
        [&self.x_tilde, &self.u, &self.w_tilde, &self.v_tilde, &self.v_next_tilde]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }
}

/// Structured sampling of point pairs.
///
/// Base states form a tensor grid with `base_per_axis` levels per axis of the
/// state domain. Each base state is paired with itself and with
/// `x + s·d` for every direction `d`, sign and scale `s` (pairs leaving the
/// state domain are dropped). Unknown inputs range over all ordered pairs of a
/// `w_levels` grid on `w_surrogate`. Noise quadruples are the all-zero one plus
/// `noise_samples` random draws from the noise domain. Controls are the domain
/// center.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub base_per_axis: usize,
    pub directions: Vec<Vector>,
    pub scales: Vec<f64>,
    pub w_levels: usize,
    pub w_surrogate: Option<BoxDomain>,
    pub noise_samples: usize,
    pub seed: u64,
}

impl GridSpec {
    /// Defaults with one direction per state axis, scaled to the axis width.
    pub fn for_model(model: &SystemModel) -> Self {
        let widths = model.domains().x.widths();
        let directions = (0..model.n_x())
            .map(|i| {
                let mut d = Vector::zeros(model.n_x());
                d[i] = widths[i];
                d
            })
            .collect();
        Self {
            base_per_axis: 3,
            directions,
            scales: vec![0.01, 0.1, 0.5],
            w_levels: 3,
            w_surrogate: None,
            noise_samples: 2,
            seed: 1,
        }
    }

    pub fn write_config(&self, cfg: &mut KvConfig, prefix: &str) {
        cfg.set(format!("{prefix}.base_per_axis"), self.base_per_axis.to_string());
        let rows = Matrix::from_columns(&self.directions).transpose();
        cfg.set_matrix(format!("{prefix}.directions"), &rows);
        cfg.set_vector(format!("{prefix}.scales"), &Vector::from_vec(self.scales.clone()));
        cfg.set(format!("{prefix}.w_levels"), self.w_levels.to_string());
        if let Some(b) = &self.w_surrogate {
            cfg.set_vector(format!("{prefix}.w_lower"), b.lower());
            cfg.set_vector(format!("{prefix}.w_upper"), b.upper());
        }
        cfg.set(format!("{prefix}.noise_samples"), self.noise_samples.to_string());
        cfg.set(format!("{prefix}.seed"), self.seed.to_string());
    }

    pub fn from_config(cfg: &KvConfig, prefix: &str, model: &SystemModel) -> Result<Self, DetectError> {
        let mut g = Self::for_model(model);
        let k = |s: &str| format!("{prefix}.{s}");
        g.base_per_axis = cfg.get_usize_or(&k("base_per_axis"), g.base_per_axis)?;
        if cfg.contains(&k("directions")) {
            let m = cfg.get_matrix(&k("directions"))?;
            g.directions = m.row_iter().map(|r| r.transpose()).collect();
        }
        if let Some(s) = cfg.get_vector_opt(&k("scales"))? {
            g.scales = s.iter().copied().collect();
        }
        g.w_levels = cfg.get_usize_or(&k("w_levels"), g.w_levels)?;
        if let (Some(l), Some(u)) = (cfg.get_vector_opt(&k("w_lower"))?, cfg.get_vector_opt(&k("w_upper"))?) {
            g.w_surrogate =
                Some(BoxDomain::new(l, u).map_err(|e| DetectError::Argument(format!("w surrogate: {e}")))?);
        }
        g.noise_samples = cfg.get_usize_or(&k("noise_samples"), g.noise_samples)?;
        g.seed = cfg.get_u64_opt(&k("seed"))?.unwrap_or(g.seed);
        Ok(g)
    }

    /// Expands the spec into explicit pairs in deterministic order.
    pub fn pairs(&self, model: &SystemModel) -> Result<(Vec<PointPair>, String), DetectError> {
        let d = model.domains();
        let (w_box, scope) = w_box_and_scope(&d.w, self.w_surrogate.as_ref())?;
        if self.base_per_axis == 0 || self.w_levels == 0 {
            return Err(DetectError::Argument("empty grid".into()));
        }
        let bases = tensor_grid(&d.x, self.base_per_axis);
        let ws = tensor_grid(&w_box, self.w_levels);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let zero_v = Vector::zeros(model.n_v());
        let mut noises = vec![[zero_v.clone(), zero_v.clone(), zero_v.clone(), zero_v]];
        for _ in 0..self.noise_samples {
            noises.push([
                sample_box(&d.v, &mut rng),
                sample_box(&d.v, &mut rng),
                sample_box(&d.v, &mut rng),
                sample_box(&d.v, &mut rng),
            ]);
        }
        let u = d.u.center();
        let mut out = Vec::new();
        for x in &bases {
            let mut partners = vec![x.clone()];
            for dir in &self.directions {
                if dir.len() != model.n_x() {
                    return Err(DetectError::Argument("direction has wrong dimension".into()));
                }
                for &s in &self.scales {
                    for sign in [1.0, -1.0] {
                        let xt = x + dir * (s * sign);
                        if d.x.contains(&xt) {
                            partners.push(xt);
                        }
                    }
                }
            }
            for xt in &partners {
                for w in &ws {
                    for wt in &ws {
                        for [v, vt, vn, vnt] in &noises {
                            out.push(PointPair {
                                x: x.clone(),
                                x_tilde: xt.clone(),
                                u: u.clone(),
                                w: w.clone(),
                                w_tilde: wt.clone(),
                                v: v.clone(),
                                v_tilde: vt.clone(),
                                v_next: vn.clone(),
                                v_next_tilde: vnt.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok((out, scope))
    }
}

fn w_box_and_scope(w: &InputDomain, surrogate: Option<&BoxDomain>) -> Result<(BoxDomain, String), DetectError> {
    match (w, surrogate) {
        (_, Some(b)) => Ok((b.clone(), format!("surrogate box {b}"))),
        (InputDomain::Bounded(b), None) => Ok((b.clone(), format!("model domain {b}"))),
        (InputDomain::Unbounded(_), None) => Err(DetectError::Argument(
            "unbounded unknown-input domain needs a bounded sampling surrogate".into(),
        )),
    }
}

/// Tensor grid with `levels` equispaced values per axis (the center for one
/// level); degenerate axes contribute their single value.
pub fn tensor_grid(b: &BoxDomain, levels: usize) -> Vec<Vector> {
    let axes: Vec<Vec<f64>> = (0..b.dim())
        .map(|i| {
            let (l, u) = (b.lower()[i], b.upper()[i]);
            if l == u || levels == 1 {
                vec![0.5 * (l + u)]
            } else {
                (0..levels).map(|j| l + (u - l) * j as f64 / (levels - 1) as f64).collect()
            }
        })
        .collect();
    let mut out = vec![Vec::new()];
    for ax in &axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                ax.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(Vector::from_vec).collect()
}

/// Both sides of the dissipation inequality at one pair, or `None` when a
/// successor output leaves the output domain.
pub fn dissipation_sides(model: &SystemModel, cert: &LyapunovCertificate, q: &PointPair) -> Option<(f64, f64)> {
    let xn = model.f(&q.x, &q.u, &q.w);
    let xnt = model.f(&q.x_tilde, &q.u, &q.w_tilde);
    let y = model.h(&q.x, &q.v);
    let yt = model.h(&q.x_tilde, &q.v_tilde);
    let yn = model.h(&xn, &q.v_next);
    let ynt = model.h(&xnt, &q.v_next_tilde);
    let yd = &model.domains().y;
    if !yd.contains(&yn) || !yd.contains(&ynt) {
        return None;
    }
    let lhs = cert.storage(&(&xn - &xnt));
    let rhs = cert.mu * cert.storage(&(&q.x - &q.x_tilde))
        + cert.s_v * ((&q.v - &q.v_tilde).norm_squared() + (&q.v_next - &q.v_next_tilde).norm_squared())
        + cert.s_y * ((&y - &yt).norm_squared() + (&yn - &ynt).norm_squared());
    Some((lhs, rhs))
}

fn is_violation(lhs: f64, rhs: f64) -> bool {
    lhs - rhs > VIOLATION_RTOL * lhs.abs().max(rhs.abs())
}

fn rel_margin(lhs: f64, rhs: f64) -> Option<f64> {
    let s = lhs.abs().max(rhs.abs());
    (s > 0.0).then(|| (rhs - lhs) / s)
}

/// Evaluates the dissipation inequality on every pair of `grid`.
pub fn check_lyapunov_certificate(
    model: &SystemModel,
    cert: &LyapunovCertificate,
    grid: &GridSpec,
) -> Result<VerificationReport, DetectError> {
    cert.validate()?;
    let (pairs, scope) = grid.pairs(model)?;
    check_lyapunov_pairs(model, cert, &pairs, scope)
}

/// As [`check_lyapunov_certificate`] on explicit pairs.
pub fn check_lyapunov_pairs(
    model: &SystemModel,
    cert: &LyapunovCertificate,
    pairs: &[PointPair],
    w_scope: String,
) -> Result<VerificationReport, DetectError> {
    if pairs.is_empty() {
        return Err(DetectError::Argument("empty grid".into()));
    }
    if cert.p.nrows() != model.n_x() {
        return Err(DetectError::Argument("P does not match the state dimension".into()));
    }
    let d = model.domains();
    for (i, q) in pairs.iter().enumerate() {
        let ok = d.x.contains(&q.x)
            && d.x.contains(&q.x_tilde)
            && d.u.contains(&q.u)
            && [&q.v, &q.v_tilde, &q.v_next, &q.v_next_tilde].iter().all(|v| d.v.contains(v));
        if !ok {
            return Err(DetectError::Argument(format!("pair {i} lies outside the model domains")));
        }
    }
    let sides: Vec<Option<(f64, f64)>> = pairs.par_iter().map(|q| dissipation_sides(model, cert, q)).collect();
    let mut report = VerificationReport {
        verdict: Verdict::CertifiedOnGrid,
        counterexample: None,
        points_checked: 0,
        points_skipped: 0,
        worst_margin: f64::INFINITY,
        worst_relative_margin: f64::INFINITY,
        w_scope,
    };
    for (q, s) in pairs.iter().zip(&sides) {
        let Some((lhs, rhs)) = *s else {
            report.points_skipped += 1;
            continue;
        };
        report.points_checked += 1;
        report.worst_margin = report.worst_margin.min(rhs - lhs);
        if let Some(r) = rel_margin(lhs, rhs) {
            report.worst_relative_margin = report.worst_relative_margin.min(r);
        }
        if report.counterexample.is_none() && is_violation(lhs, rhs) {
            report.verdict = Verdict::Falsified;
            report.counterexample = Some(Counterexample {
                first: q.first(),
                second: q.second(),
                step: None,
                lhs,
                rhs,
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearDetectReport {
    pub rank_b: usize,
    pub rank_cb: usize,
    pub rank_condition_holds: bool,
    /// `(I − B̃YC)A` with `B̃` an orthonormal basis of `im B` and `Y` the
    /// pseudo-inverse of `CB̃`; `A` itself when `B = 0` and `None` when the
    /// rank condition fails.
    #[serde(skip)]
    pub error_dynamics_matrix: Option<Matrix>,
    pub spectral_radius: Option<f64>,
    pub strongly_detectable: bool,
}

/// Rank condition `rank(CB) = rank(B)` plus Schur stability of the
/// unknown-input-decoupled error map.
pub fn check_linear_strong_detectability(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    tol: Option<f64>,
) -> Result<LinearDetectReport, DetectError> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || c.ncols() != n {
        return Err(DetectError::Argument(format!(
            "A {}x{}, B {}x{}, C {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    let cb = c * b;
    let rank_b = rank(b, tol);
    let rank_cb = rank(&cb, tol);
    if rank_cb > rank_b {
        return Err(DetectError::Tolerance { rank_b, rank_cb });
    }
    if rank_cb < rank_b {
        return Ok(LinearDetectReport {
            rank_b,
            rank_cb,
            rank_condition_holds: false,
            error_dynamics_matrix: None,
            spectral_radius: None,
            strongly_detectable: false,
        });
    }
    let e = if rank_b == 0 {
        a.clone()
    } else {
        let bt = range_basis(b, tol);
        let y = crate::linalg::pinv(&(c * &bt), tol);
        (Matrix::identity(n, n) - &bt * y * c) * a
    };
    let rho = spectral_radius(&e);
    Ok(LinearDetectReport {
        rank_b,
        rank_cb,
        rank_condition_holds: true,
        error_dynamics_matrix: Some(e),
        spectral_radius: Some(rho),
        strongly_detectable: rho < 1.0,
    })
}

/// Smallest `N ≥ 1` with `8 μᴺ a2/a1 < ρ`; `None` if none up to [`HORIZON_CAP`].
pub fn min_horizon_full_order(cert: &LyapunovCertificate, rho: f64) -> Result<Option<usize>, DetectError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DetectError::Argument(format!("rho = {rho} not in (0, 1)")));
    }
    if !(cert.mu > 0.0 && cert.mu < 1.0 && cert.a1 > 0.0 && cert.a2 > 0.0) {
        return Err(DetectError::InvalidCertificate("need 0 < mu < 1 and a1, a2 > 0".into()));
    }
    let holds = |n: usize| 8.0 * cert.mu.powi(n as i32) * cert.a2 / cert.a1 < rho;
    // closed-form estimate, then correct for rounding
    let est = ((rho * cert.a1 / (8.0 * cert.a2)).ln() / cert.mu.ln()).floor();
    let mut n = if est.is_finite() { (est.max(1.0) as usize).min(HORIZON_CAP) } else { 1 };
    while n > 1 && holds(n - 1) {
        n -= 1;
    }
    while n <= HORIZON_CAP && !holds(n) {
        n += 1;
    }
    Ok((n <= HORIZON_CAP).then_some(n))
}

/// Smallest integer `N ≥ 1` with `N > −log_μ(4 c_x)`.
pub fn min_horizon_two_stage(cert: &ExpIossCertificate) -> Result<usize, DetectError> {
    if !(cert.mu > 0.0 && cert.mu < 1.0 && cert.c_x > 0.0) {
        return Err(DetectError::InvalidCertificate("need 0 < mu < 1 and c_x > 0".into()));
    }
    let bound = -(4.0 * cert.c_x).ln() / cert.mu.ln();
    Ok(if bound < 1.0 { 1 } else { bound.floor() as usize + 1 })
}

/// A pair of reduced-model trajectories sharing the control sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedPair {
    pub z0: Vector,
    pub z0_hat: Vector,
    pub gammas: Vec<Vector>,
    pub gammas_hat: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub noises: Vec<Vector>,
    pub noises_hat: Vec<Vector>,
}

impl ReducedPair {
    pub fn len(&self) -> usize {
        self.controls.len()
    }
    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

/// Rolls out both trajectories: states `0..=len` and outputs `0..len`.
pub fn rollout_pair(red: &ReducedModel, p: &ReducedPair) -> [(Vec<Vector>, Vec<Vector>); 2] {
    let run = |z0: &Vector, g: &[Vector], v: &[Vector]| {
        let mut zs = vec![z0.clone()];
        let mut ys = Vec::with_capacity(p.len());
        for k in 0..p.len() {
            let z = &zs[k];
            ys.push(red.h_t(z, &g[k], &v[k]));
            let zn = red.f_sharp(z, &g[k], &p.controls[k], &v[k]);
            zs.push(zn);
        }
        (zs, ys)
    };
    [run(&p.z0, &p.gammas, &p.noises), run(&p.z0_hat, &p.gammas_hat, &p.noises_hat)]
}

/// Sampling of reduced trajectory pairs.
///
/// Each base pair starts from a full-model trajectory with `x₀` uniform in the
/// state domain, `w` uniform in `w_box` and uniform noise; `γ` is its output.
/// The partner starts from `z♯₀ + s·d` for every direction, sign and scale,
/// uses independent noise when `partner_noise` is set and `γ̂ = γ + δ` with
/// `δ` uniform in `±gamma_perturbation`. Pairs leaving the reduced domain are
/// truncated at the first exit.
#[derive(Clone, Debug)]
pub struct ExpIossSampling {
    pub trajectories: usize,
    pub length: usize,
    pub directions: Vec<Vector>,
    pub scales: Vec<f64>,
    pub w_box: BoxDomain,
    pub partner_noise: bool,
    pub gamma_perturbation: f64,
    pub seed: u64,
}

impl ExpIossSampling {
    /// Reads `<prefix>.*`. Directions come either as `directions` in reduced
    /// coordinates or as `state_directions`, mapped through `T♯`.
    pub fn from_config(cfg: &KvConfig, prefix: &str, red: &ReducedModel) -> Result<Self, DetectError> {
        let k = |s: &str| format!("{prefix}.{s}");
        let t = red.transform();
        let n = red.model().n_x();
        let directions: Vec<Vector> = if cfg.contains(&k("directions")) {
            cfg.get_matrix(&k("directions"))?.row_iter().map(|r| r.transpose()).collect()
        } else if cfg.contains(&k("state_directions")) {
            let origin = t.sharp(&Vector::zeros(n));
            cfg.get_matrix(&k("state_directions"))?
                .row_iter()
                .map(|r| t.sharp(&r.transpose()) - &origin)
                .collect()
        } else {
            (0..red.n_sharp())
                .map(|i| {
                    let mut d = Vector::zeros(red.n_sharp());
                    d[i] = red.domain_sharp().widths()[i];
                    d
                })
                .collect()
        };
        if directions.iter().any(|d| d.len() != red.n_sharp()) {
            return Err(DetectError::Argument(format!("{prefix}: directions must have dim {}", red.n_sharp())));
        }
        let w_box = match (cfg.get_vector_opt(&k("w_lower"))?, cfg.get_vector_opt(&k("w_upper"))?) {
            (Some(l), Some(u)) => BoxDomain::new(l, u).map_err(|e| DetectError::Argument(format!("w box: {e}")))?,
            _ => match &red.model().domains().w {
                InputDomain::Bounded(b) => b.clone(),
                InputDomain::Unbounded(_) => {
                    return Err(DetectError::Argument(format!(
                        "{prefix}: unbounded unknown input needs w_lower and w_upper"
                    )))
                }
            },
        };
        let gamma_perturbation = cfg.get_f64_or(&k("gamma_perturbation"), 0.0)?;
        Ok(Self {
            trajectories: cfg.get_usize_or(&k("trajectories"), 20)?,
            length: cfg.get_usize_or(&k("length"), 60)?,
            directions,
            scales: match cfg.get_vector_opt(&k("scales"))? {
                Some(s) => s.iter().copied().collect(),
                None => vec![0.01, 0.1, 0.4],
            },
            w_box,
            partner_noise: cfg.get_bool_or(&k("partner_noise"), false)?,
            gamma_perturbation,
            seed: cfg.get_u64_opt(&k("seed"))?.unwrap_or(5),
        })
    }

    pub fn pairs(&self, red: &ReducedModel) -> Vec<ReducedPair> {
        let model = red.model();
        let t = red.transform();
        let d = model.domains();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for _ in 0..self.trajectories {
            let x0 = sample_box(&d.x, &mut rng);
            let mut xs = vec![x0];
            let mut gammas = Vec::new();
            let mut noises = Vec::new();
            let mut controls = Vec::new();
            for k in 0..self.length {
                let v = sample_box(&d.v, &mut rng);
                let u = sample_box(&d.u, &mut rng);
                let w = sample_box(&self.w_box, &mut rng);
                gammas.push(model.h(&xs[k], &v));
                noises.push(v);
                let xn = model.f(&xs[k], &u, &w);
                controls.push(u);
                xs.push(xn);
            }
            let z0 = t.sharp(&xs[0]);
            for dir in &self.directions {
                for &s in &self.scales {
                    for sign in [1.0, -1.0] {
                        let z0_hat = &z0 + dir * (s * sign);
                        let noises_hat = if self.partner_noise {
                            (0..self.length).map(|_| sample_box(&d.v, &mut rng)).collect()
                        } else {
                            noises.clone()
                        };
                        let gammas_hat = gammas
                            .iter()
                            .map(|g| {
                                if self.gamma_perturbation > 0.0 {
                                    let r = BoxDomain::symmetric(&vec![self.gamma_perturbation; g.len()])
                                        .expect("positive radius");
                                    g + sample_box(&r, &mut rng)
                                } else {
                                    g.clone()
                                }
                            })
                            .collect();
                        let pair = ReducedPair {
                            z0: z0.clone(),
                            z0_hat,
                            gammas: gammas.clone(),
                            gammas_hat,
                            controls: controls.clone(),
                            noises: noises.clone(),
                            noises_hat,
                        };
                        if let Some(p) = truncate_to_domain(red, pair) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }
}

fn first_exit(red: &ReducedModel, p: &ReducedPair) -> Option<usize> {
    let zd = red.domain_sharp();
    let d = red.model().domains();
    let [(zs, ys), (zhs, yhs)] = rollout_pair(red, p);
    let z_ok = |k: usize| zd.contains(&zs[k]) && zd.contains(&zhs[k]);
    for k in 0..p.len() {
        let ok = z_ok(k)
            && d.y.contains(&ys[k])
            && d.y.contains(&yhs[k])
            && d.y.contains(&p.gammas[k])
            && d.y.contains(&p.gammas_hat[k])
            && d.v.contains(&p.noises[k])
            && d.v.contains(&p.noises_hat[k])
            && d.u.contains(&p.controls[k]);
        if !ok {
            return Some(k);
        }
    }
    (!z_ok(p.len())).then_some(p.len())
}

fn truncate_to_domain(red: &ReducedModel, mut p: ReducedPair) -> Option<ReducedPair> {
    match first_exit(red, &p) {
        None => Some(p),
        Some(0) => None,
        Some(k) => {
            // states up to index k-1 are inside; keep k-1 transitions
            let keep = k - 1;
            if keep == 0 {
                return None;
            }
            p.gammas.truncate(keep);
            p.gammas_hat.truncate(keep);
            p.controls.truncate(keep);
            p.noises.truncate(keep);
            p.noises_hat.truncate(keep);
            if first_exit(red, &p).is_none() {
                Some(p)
            } else {
                None
            }
        }
    }
}

/// Both sides of the exponential i-IOSS bound for `k = 0..=len`.
pub fn exp_ioss_sides(red: &ReducedModel, cert: &ExpIossCertificate, p: &ReducedPair) -> Vec<(f64, f64)> {
    let [(zs, ys), (zhs, yhs)] = rollout_pair(red, p);
    let dz0 = (&zs[0] - &zhs[0]).norm_squared();
    let mut out = Vec::with_capacity(p.len() + 1);
    // acc_k = Σ_{i<k} μ^{k-i} e_i, built as acc_{k+1} = μ (acc_k + e_k)
    let mut acc = 0.0;
    for k in 0..=p.len() {
        let lhs = (&zs[k] - &zhs[k]).norm_squared();
        let rhs = acc + cert.c_x * cert.mu.powi(k as i32) * dz0;
        out.push((lhs, rhs));
        if k < p.len() {
            let e = cert.c_v * (&p.noises[k] - &p.noises_hat[k]).norm_squared()
                + cert.c_y * (&ys[k] - &yhs[k]).norm_squared()
                + cert.c_gamma * (&p.gammas[k] - &p.gammas_hat[k]).norm_squared();
            acc = cert.mu * (acc + e);
        }
    }
    out
}

/// Evaluates the exponential i-IOSS bound along every sampled pair.
pub fn check_exp_ioss(
    red: &ReducedModel,
    cert: &ExpIossCertificate,
    pairs: &[ReducedPair],
) -> Result<VerificationReport, DetectError> {
    cert.validate()?;
    if pairs.is_empty() {
        return Err(DetectError::Argument("no trajectory pairs".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        let n = p.len();
        if [p.gammas.len(), p.gammas_hat.len(), p.noises.len(), p.noises_hat.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(DetectError::Argument(format!("pair {i} has inconsistent lengths")));
        }
        if first_exit(red, p).is_some() {
            return Err(DetectError::Argument(format!("pair {i} leaves the reduced domain")));
        }
    }
    let sides: Vec<Vec<(f64, f64)>> = pairs.par_iter().map(|p| exp_ioss_sides(red, cert, p)).collect();
    let mut report = VerificationReport {
        verdict: Verdict::CertifiedOnGrid,
        counterexample: None,
        points_checked: 0,
        points_skipped: 0,
        worst_margin: f64::INFINITY,
        worst_relative_margin: f64::INFINITY,
        w_scope: "full-model trajectories generating the fictitious input".into(),
    };
    for (p, s) in pairs.iter().zip(&sides) {
        for (k, &(lhs, rhs)) in s.iter().enumerate() {
            report.points_checked += 1;
            report.worst_margin = report.worst_margin.min(rhs - lhs);
            if let Some(r) = rel_margin(lhs, rhs) {
                report.worst_relative_margin = report.worst_relative_margin.min(r);
            }
            if report.counterexample.is_none() && is_violation(lhs, rhs) {
                report.verdict = Verdict::Falsified;
                report.counterexample = Some(Counterexample {
                    first: trajectory_args(&p.z0, &p.gammas, &p.noises),
                    second: trajectory_args(&p.z0_hat, &p.gammas_hat, &p.noises_hat),
                    step: Some(k),
                    lhs,
                    rhs,
                });
            }
        }
    }
    Ok(report)
}

fn trajectory_args(z0: &Vector, g: &[Vector], v: &[Vector]) -> Vec<f64> {
    z0.iter()
        .chain(g.iter().flat_map(|x| x.iter()))
        .chain(v.iter().flat_map(|x| x.iter()))
        .copied()
        .collect()
}
