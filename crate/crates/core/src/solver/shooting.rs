//! Single-shooting transcription of estimation windows.
//!
//! A window is a chain of stages. Stage `j` maps the propagated state `s_j`
//! and its own decision block `d_j` to the next state and a residual block.
//! The decision vector is `(s_0, d_0, ..., d_{L-1})` and the cost is the
//! squared norm of `(prior(s_0), R_0, ..., R_{L-1}, terminal(s_L))`.
//!
//! The Jacobian is assembled from per-stage local derivatives propagated
//! through the chain, so its price grows linearly with the window length.

use super::{NlpProblem, SolverError};
use crate::detectability::{ExpIossCertificate, LyapunovCertificate};
use crate::linalg::Matrix;
use crate::model::{BoxDomain, SystemModel, Vector};
use crate::transform::ReducedModel;

pub type StageFn<'a> = dyn Fn(usize, &Vector, &Vector) -> (Option<Vector>, Vector) + Sync + 'a;
pub type BlockFn<'a> = dyn Fn(&Vector) -> Vector + Sync + 'a;

/// A staged sum-of-squares residual.
pub struct StagedResidual<'a> {
    pub state_dim: usize,
    pub stage_dims: Vec<usize>,
    pub prior: Box<BlockFn<'a>>,
    /// `(next state, residual)`; the last stage may return no next state.
    pub stage: Box<StageFn<'a>>,
    pub terminal: Option<Box<BlockFn<'a>>>,
    /// Typical magnitudes of the propagated state and of every decision
    /// coordinate; they set the finite-difference steps.
    pub state_scale: Vector,
    pub decision_scale: Vector,
    pub fd_step: f64,
}

/// Decision vector split into the initial state and per-stage blocks.
fn split<'v>(dims: &[usize], n_s: usize, theta: &'v Vector) -> (Vector, Vec<Vector>) {
    let s0 = theta.rows(0, n_s).into_owned();
    let mut at = n_s;
    let blocks = dims
        .iter()
        .map(|&d| {
            let b = theta.rows(at, d).into_owned();
            at += d;
            b
        })
        .collect();
    (s0, blocks)
}

impl StagedResidual<'_> {
    pub fn dim(&self) -> usize {
        self.state_dim + self.stage_dims.iter().sum::<usize>()
    }

    /// Propagated states `s_0, s_1, ...` (as many as the stages produce).
    pub fn rollout(&self, theta: &Vector) -> Vec<Vector> {
        let (s0, blocks) = split(&self.stage_dims, self.state_dim, theta);
        let mut states = vec![s0];
        for (j, d) in blocks.iter().enumerate() {
            match (self.stage)(j, states.last().expect("nonempty"), d).0 {
                Some(next) => states.push(next),
                None => break,
            }
        }
        states
    }

    pub fn residual(&self, theta: &Vector) -> Vector {
        let (s0, blocks) = split(&self.stage_dims, self.state_dim, theta);
        let mut parts = vec![(self.prior)(&s0)];
        let mut s = Some(s0);
        for (j, d) in blocks.iter().enumerate() {
            let cur = s.take().expect("stage after a terminal stage");
            let (next, r) = (self.stage)(j, &cur, d);
            parts.push(r);
            s = next;
        }
        if let (Some(t), Some(s)) = (&self.terminal, &s) {
            parts.push(t(s));
        }
        concat(&parts)
    }

    /// Residual and Jacobian by stage-wise sensitivity propagation.
    pub fn jacobian(&self, theta: &Vector) -> (Vector, Matrix) {
        let n_s = self.state_dim;
        let n = self.dim();
        let (s0, blocks) = split(&self.stage_dims, n_s, theta);

        let (r0, jp) = local_fd(|x| (self.prior)(x), &s0, &self.step_vec(&s0, &self.state_scale));
        let mut rows: Vec<(Vector, Matrix)> = Vec::with_capacity(blocks.len() + 2);
        let mut jr = Matrix::zeros(r0.len(), n);
        jr.view_mut((0, 0), (r0.len(), n_s)).copy_from(&jp);
        rows.push((r0, jr));

        // sensitivity of the current state to the decision vector
        let mut sens = Matrix::zeros(n_s, n);
        sens.view_mut((0, 0), (n_s, n_s)).fill_with_identity();
        let mut s = Some(s0);
        let mut offset = n_s;
        for (j, d) in blocks.iter().enumerate() {
            let cur = s.take().expect("stage after a terminal stage");
            let nd = d.len();
            let (next, r) = (self.stage)(j, &cur, d);
            let sd = self.state_scale.len();
            let mut steps = Vector::zeros(n_s + nd);
            steps.rows_mut(0, n_s).copy_from(&self.step_vec(&cur, &self.state_scale));
            let dscale = self.decision_scale.rows(offset, nd).into_owned();
            steps.rows_mut(n_s, nd).copy_from(&self.step_vec(d, &dscale));
            debug_assert_eq!(sd, n_s);

            let has_next = next.is_some();
            let nr = r.len();
            let mut xz = Vector::zeros(n_s + nd);
            xz.rows_mut(0, n_s).copy_from(&cur);
            xz.rows_mut(n_s, nd).copy_from(d);
            let stacked = |v: &Vector| {
                let (nx, rr) = (self.stage)(j, &v.rows(0, n_s).into_owned(), &v.rows(n_s, nd).into_owned());
                match nx {
                    Some(nx) if has_next => concat(&[rr, nx]),
                    _ => rr,
                }
            };
            let (_, loc) = local_fd(stacked, &xz, &steps);
            let c = loc.view((0, 0), (nr, n_s));
            let dd = loc.view((0, n_s), (nr, nd));
            let mut jr = &c * &sens;
            {
                let mut blk = jr.view_mut((0, offset), (nr, nd));
                blk += dd;
            }
            rows.push((r, jr));
            if let Some(nx) = next {
                let a = loc.view((nr, 0), (n_s, n_s));
                let b = loc.view((nr, n_s), (n_s, nd));
                let mut ns = &a * &sens;
                {
                    let mut blk = ns.view_mut((0, offset), (n_s, nd));
                    blk += b;
                }
                sens = ns;
                s = Some(nx);
            }
            offset += nd;
        }
        if let (Some(t), Some(s)) = (&self.terminal, &s) {
            let (rt, jt) = local_fd(|x| t(x), s, &self.step_vec(s, &self.state_scale));
            rows.push((rt, &jt * &sens));
        }
        let m: usize = rows.iter().map(|(r, _)| r.len()).sum();
        let mut r = Vector::zeros(m);
        let mut jac = Matrix::zeros(m, n);
        let mut at = 0;
        for (rb, jb) in rows {
            let k = rb.len();
            r.rows_mut(at, k).copy_from(&rb);
            jac.view_mut((at, 0), (k, n)).copy_from(&jb);
            at += k;
        }
        (r, jac)
    }

    fn step_vec(&self, x: &Vector, scale: &Vector) -> Vector {
        Vector::from_iterator(x.len(), (0..x.len()).map(|i| self.fd_step * scale[i].max(1e-3 * x[i].abs())))
    }
}

fn concat(parts: &[Vector]) -> Vector {
    Vector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

fn local_fd(f: impl Fn(&Vector) -> Vector, x: &Vector, steps: &Vector) -> (Vector, Matrix) {
    super::fd_jacobian(f, x, steps)
}

/// Measurements and priors over a window `s..=k`.
///
/// `outputs` and `noise_priors` hold `N_k + 1` entries, `controls` holds
/// `N_k`. Each cost form reads the part it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub outputs: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub noise_priors: Vec<Vector>,
    /// Anchor of the prior term: a full state, or a reduced state for the
    /// two-stage form.
    pub prior: Vector,
}

impl Window {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    fn validate(&self) -> Result<(), SolverError> {
        let n = self.controls.len();
        if self.outputs.len() != n + 1 || self.noise_priors.len() != n + 1 {
            return Err(SolverError::Argument(format!(
                "window with {} controls needs {} outputs and noise priors, got {} and {}",
                n,
                n + 1,
                self.outputs.len(),
                self.noise_priors.len()
            )));
        }
        Ok(())
    }
}

/// Scaled-identity weights of the standard discounted MHE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineWeights {
    pub mu: f64,
    pub p1: f64,
    pub q_w: f64,
    pub q_v: f64,
    pub q_y: f64,
}

/// The estimator cost families.
#[derive(Clone, Copy, Debug)]
pub enum CostForm<'a> {
    /// Discounted full-information cost over `s..=k`, used by FIE and by the
    /// full-order MHE. Includes the current measurement.
    FullOrder(&'a LyapunovCertificate),
    /// Reduced-order cost over `s..k-1` driven by measured outputs.
    TwoStage(&'a ReducedModel, &'a ExpIossCertificate),
    /// One-step-ahead discounted MHE over `s..k-1` with penalized `ŵ`.
    Baseline(BaselineWeights),
}

#[derive(Clone, Debug)]
pub struct ShootingSpec<'a> {
    pub cost: CostForm<'a>,
    /// Weight on the squared width-normalized excess of propagated states
    /// and predicted outputs outside their domains.
    pub penalty_weight: f64,
    /// Box for `ŵ`; free when absent.
    pub w_box: Option<BoxDomain>,
    pub fd_step: f64,
}

/// Decoded decision vector of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSolution {
    pub initial: Vector,
    pub noises: Vec<Vector>,
    pub unknown_inputs: Vec<Vector>,
    /// Propagated states, including the end of the window when it exists.
    pub states: Vec<Vector>,
}

/// A transcribed window: residual, bounds and decision layout.
pub struct ShootingObjective<'a> {
    pub staged: StagedResidual<'a>,
    pub lower: Vector,
    pub upper: Vector,
    n_init: usize,
    n_v: usize,
    /// `(has v̂, has ŵ)` for each stage.
    layout: Vec<(bool, bool)>,
    n_w: usize,
}

impl<'a> ShootingObjective<'a> {
    pub fn dim(&self) -> usize {
        self.staged.dim()
    }

    pub fn cost(&self, theta: &Vector) -> f64 {
        self.staged.residual(theta).norm_squared()
    }

    pub fn problem(&self) -> NlpProblem<'_> {
        let st = &self.staged;
        NlpProblem::least_squares(self.dim(), move |x: &Vector| st.residual(x))
            .with_jacobian(move |x: &Vector| st.jacobian(x))
            .with_bounds(self.lower.clone(), self.upper.clone())
            .with_scaling(self.staged.decision_scale.clone())
    }

    /// Assembles a decision vector; missing trailing blocks are zero.
    pub fn pack(&self, initial: &Vector, noises: &[Vector], unknown_inputs: &[Vector]) -> Vector {
        let mut out: Vec<f64> = initial.iter().copied().collect();
        let (mut iv, mut iw) = (0, 0);
        for &(hv, hw) in &self.layout {
            if hv {
                match noises.get(iv) {
                    Some(v) => out.extend(v.iter()),
                    None => out.extend(std::iter::repeat_n(0.0, self.n_v)),
                }
                iv += 1;
            }
            if hw {
                match unknown_inputs.get(iw) {
                    Some(w) => out.extend(w.iter()),
                    None => out.extend(std::iter::repeat_n(0.0, self.n_w)),
                }
                iw += 1;
            }
        }
        Vector::from_vec(out)
    }

    pub fn decode(&self, theta: &Vector) -> WindowSolution {
        let initial = theta.rows(0, self.n_init).into_owned();
        let mut at = self.n_init;
        let (mut noises, mut unknown_inputs) = (Vec::new(), Vec::new());
        for &(hv, hw) in &self.layout {
            if hv {
                noises.push(theta.rows(at, self.n_v).into_owned());
                at += self.n_v;
            }
            if hw {
                unknown_inputs.push(theta.rows(at, self.n_w).into_owned());
                at += self.n_w;
            }
        }
        WindowSolution {
            initial,
            noises,
            unknown_inputs,
            states: self.staged.rollout(theta),
        }
    }
}

fn normalized_excess(b: &BoxDomain, x: &Vector, sqrt_rho: f64) -> Vector {
    let w = b.widths();
    b.excess(x).zip_map(&w, |e, wi| sqrt_rho * e / if wi > 0.0 { wi } else { 1.0 })
}

fn floor_scale(v: Vector) -> Vector {
    v.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

/// Transcribes one window of `model` into a box-constrained least-squares
/// problem with the dynamics eliminated by forward simulation.
///
/// Decision layouts, for a window `s..=k` of `N_k` steps:
/// * full-order: `(x̂_s, v̂_s, ŵ_s, ..., v̂_{k-1}, ŵ_{k-1}, v̂_k)`;
/// * two-stage: `(ẑ♯_s, v̂_s, ..., v̂_{k-1})`;
/// * baseline: `(x̂_s, v̂_s, ŵ_s, ..., v̂_{k-1}, ŵ_{k-1})`.
pub fn build_shooting_objective<'a>(
    model: &'a SystemModel,
    window: &'a Window,
    spec: &ShootingSpec<'a>,
) -> Result<ShootingObjective<'a>, SolverError> {
    window.validate()?;
    let d = model.domains();
    let (n_x, n_v, n_w) = (model.n_x(), model.n_v(), model.n_w());
    let n_k = window.len();
    if spec.penalty_weight < 0.0 || !spec.penalty_weight.is_finite() {
        return Err(SolverError::Argument("penalty weight must be finite and nonnegative".into()));
    }
    let sqrt_rho = spec.penalty_weight.sqrt();
    let w_box = spec.w_box.clone();
    let w_lo = w_box.as_ref().map(|b| b.lower().clone()).unwrap_or_else(|| Vector::from_element(n_w, f64::NEG_INFINITY));
    let w_hi = w_box.as_ref().map(|b| b.upper().clone()).unwrap_or_else(|| Vector::from_element(n_w, f64::INFINITY));
    let w_scale = floor_scale(w_box.as_ref().map(|b| b.widths()).unwrap_or_else(|| Vector::from_element(n_w, 1.0)));
    let v_scale = floor_scale(d.v.widths());
    let x_scale = floor_scale(d.x.widths());

    let mut lower: Vec<f64> = Vec::new();
    let mut upper: Vec<f64> = Vec::new();
    let mut scale: Vec<f64> = Vec::new();
    let mut layout = Vec::new();
    let push = |lo: &Vector, hi: &Vector, sc: &Vector, lower: &mut Vec<f64>, upper: &mut Vec<f64>, scale: &mut Vec<f64>| {
        lower.extend(lo.iter());
        upper.extend(hi.iter());
        scale.extend(sc.iter());
    };

    match spec.cost {
        CostForm::FullOrder(cert) => {
            if window.prior.len() != n_x {
                return Err(SolverError::Dimension("full-order prior must be a full state".into()));
            }
            let mu = cert.mu;
            let prior_w = (mu.powi(n_k as i32) * cert.a2 * 4.0).sqrt();
            push(d.x.lower(), d.x.upper(), &x_scale, &mut lower, &mut upper, &mut scale);
            let mut stage_dims = Vec::with_capacity(n_k + 1);
            for j in 0..=n_k {
                let last = j == n_k;
                push(d.v.lower(), d.v.upper(), &v_scale, &mut lower, &mut upper, &mut scale);
                if !last {
                    push(&w_lo, &w_hi, &w_scale, &mut lower, &mut upper, &mut scale);
                }
                layout.push((true, !last));
                stage_dims.push(if last { n_v } else { n_v + n_w });
            }
            let win = window;
            let stage = move |j: usize, x: &Vector, dv: &Vector| {
                let lag = (n_k - j) as i32;
                let wt = 2.0 * mu.powi(lag - 1);
                let v = dv.rows(0, n_v).into_owned();
                let y_hat = model.h(x, &v);
                let r = concat(&[
                    (&v - &win.noise_priors[j]) * (wt * cert.s_v * 4.0).sqrt(),
                    (&win.outputs[j] - &y_hat) * (wt * cert.s_y).sqrt(),
                    normalized_excess(&d.x, x, sqrt_rho),
                    normalized_excess(&d.y, &y_hat, sqrt_rho),
                ]);
                let next = (j < n_k).then(|| model.f(x, &win.controls[j], &dv.rows(n_v, n_w).into_owned()));
                (next, r)
            };
            let prior = window.prior.clone();
            Ok(ShootingObjective {
                staged: StagedResidual {
                    state_dim: n_x,
                    stage_dims,
                    prior: Box::new(move |x: &Vector| (x - &prior) * prior_w),
                    stage: Box::new(stage),
                    terminal: None,
                    state_scale: x_scale.clone(),
                    decision_scale: Vector::from_vec(scale),
                    fd_step: spec.fd_step,
                },
                lower: Vector::from_vec(lower),
                upper: Vector::from_vec(upper),
                n_init: n_x,
                n_v,
                layout,
                n_w,
            })
        }
        CostForm::Baseline(bw) => {
            if window.prior.len() != n_x {
                return Err(SolverError::Dimension("baseline prior must be a full state".into()));
            }
            let mu = bw.mu;
            let prior_w = (mu.powi(n_k as i32) * bw.p1).sqrt();
            push(d.x.lower(), d.x.upper(), &x_scale, &mut lower, &mut upper, &mut scale);
            for _ in 0..n_k {
                push(d.v.lower(), d.v.upper(), &v_scale, &mut lower, &mut upper, &mut scale);
                push(&w_lo, &w_hi, &w_scale, &mut lower, &mut upper, &mut scale);
                layout.push((true, true));
            }
            let win = window;
            let stage = move |j: usize, x: &Vector, dv: &Vector| {
                let wt = mu.powi((n_k - j) as i32);
                let v = dv.rows(0, n_v).into_owned();
                let w = dv.rows(n_v, n_w).into_owned();
                let y_hat = model.h(x, &v);
                let r = concat(&[
                    &w * (wt * bw.q_w).sqrt(),
                    (&v - &win.noise_priors[j]) * (wt * bw.q_v).sqrt(),
                    (&win.outputs[j] - &y_hat) * (wt * bw.q_y).sqrt(),
                    normalized_excess(&d.x, x, sqrt_rho),
                    normalized_excess(&d.y, &y_hat, sqrt_rho),
                ]);
                (Some(model.f(x, &win.controls[j], &w)), r)
            };
            let prior = window.prior.clone();
            Ok(ShootingObjective {
                staged: StagedResidual {
                    state_dim: n_x,
                    stage_dims: vec![n_v + n_w; n_k],
                    prior: Box::new(move |x: &Vector| (x - &prior) * prior_w),
                    stage: Box::new(stage),
                    terminal: Some(Box::new(move |x: &Vector| normalized_excess(&d.x, x, sqrt_rho))),
                    state_scale: x_scale.clone(),
                    decision_scale: Vector::from_vec(scale),
                    fd_step: spec.fd_step,
                },
                lower: Vector::from_vec(lower),
                upper: Vector::from_vec(upper),
                n_init: n_x,
                n_v,
                layout,
                n_w,
            })
        }
        CostForm::TwoStage(red, cert) => {
            let n_sh = red.n_sharp();
            if window.prior.len() != n_sh {
                return Err(SolverError::Dimension("two-stage prior must be a reduced state".into()));
            }
            let dom = red.domain_sharp();
            let z_scale = floor_scale(dom.widths());
            let mu = cert.mu;
            let prior_w = (mu.powi(n_k as i32) * 2.0 * cert.c_x).sqrt();
            push(dom.lower(), dom.upper(), &z_scale, &mut lower, &mut upper, &mut scale);
            for _ in 0..n_k {
                push(d.v.lower(), d.v.upper(), &v_scale, &mut lower, &mut upper, &mut scale);
                layout.push((true, false));
            }
            let win = window;
            let stage = move |j: usize, z: &Vector, v: &Vector| {
                let wt = mu.powi((n_k - j) as i32);
                let gamma = &win.outputs[j];
                let x = red.lift(z, gamma, v);
                let y_hat = model.h(&x, v);
                let r = concat(&[
                    (v - &win.noise_priors[j]) * (wt * 2.0 * cert.c_v).sqrt(),
                    (gamma - &y_hat) * (wt * cert.c_y).sqrt(),
                    normalized_excess(&d.x, &x, sqrt_rho),
                    normalized_excess(&d.y, &y_hat, sqrt_rho),
                ]);
                let next = red.transform().sharp(&model.f(&x, &win.controls[j], &red_w(red)));
                (Some(next), r)
            };
            let prior = window.prior.clone();
            Ok(ShootingObjective {
                staged: StagedResidual {
                    state_dim: n_sh,
                    stage_dims: vec![n_v; n_k],
                    prior: Box::new(move |z: &Vector| (z - &prior) * prior_w),
                    stage: Box::new(stage),
                    terminal: Some(Box::new(move |z: &Vector| normalized_excess(dom, z, sqrt_rho))),
                    state_scale: z_scale,
                    decision_scale: Vector::from_vec(scale),
                    fd_step: spec.fd_step,
                },
                lower: Vector::from_vec(lower),
                upper: Vector::from_vec(upper),
                n_init: n_sh,
                n_v,
                layout,
                n_w: 0,
            })
        }
    }
}

fn red_w(red: &ReducedModel) -> Vector {
    red.model().reference_w()
}
