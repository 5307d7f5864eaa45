//! Optimization-based state estimators: full information, full-order MHE,
//! two-stage reduced-order MHE and a standard discounted MHE baseline.

use std::collections::VecDeque;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::detectability::{DetectError, ExpIossCertificate, LyapunovCertificate};
use crate::model::{BoxDomain, SystemModel, Vector};
use crate::solver::shooting::{build_shooting_objective, BaselineWeights, CostForm, ShootingSpec, Window, WindowSolution};
use crate::solver::{solve_box_nlp, SolverOptions, SolverStatus};
use crate::transform::{project_estimate, recover_full_state, ReducedModel};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid estimator config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Certificate(#[from] DetectError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Fie,
    FullOrder,
    TwoStage,
    Baseline,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fie" => Scheme::Fie,
            "full-order" => Scheme::FullOrder,
            "two-stage" => Scheme::TwoStage,
            "baseline" => Scheme::Baseline,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fie => "fie",
            Scheme::FullOrder => "full-order",
            Scheme::TwoStage => "two-stage",
            Scheme::Baseline => "baseline",
        }
    }
}

/// Noise prior `v̄_k`.
#[derive(Clone, Debug, PartialEq)]
pub enum NoisePrior {
    Constant(Vector),
    /// Per-step values; the last one repeats past the end.
    PerStep(Vec<Vector>),
}

impl NoisePrior {
    pub fn at(&self, k: usize) -> Vector {
        match self {
            NoisePrior::Constant(v) => v.clone(),
            NoisePrior::PerStep(vs) => vs[k.min(vs.len() - 1)].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Lyapunov(LyapunovCertificate),
    ExpIoss(ExpIossCertificate),
    Baseline(BaselineWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub scheme: Scheme,
    /// Window length `N`; ignored by the full information estimator.
    pub horizon: usize,
    pub x0_prior: Vector,
    pub v_prior: NoisePrior,
    pub weights: Weights,
    pub solver: SolverOptions,
    pub w_box: Option<BoxDomain>,
    pub penalty_weight: f64,
    /// Project the recovered two-stage estimate onto the image of the state
    /// domain.
    pub project: bool,
}

pub const DEFAULT_PENALTY_WEIGHT: f64 = 1e6;

impl EstimatorConfig {
    pub fn validate(&self, model: &SystemModel) -> Result<(), EstimatorError> {
        let bad = |m: String| Err(EstimatorError::Invalid(m));
        if self.horizon == 0 && self.scheme != Scheme::Fie {
            return bad("horizon must be at least 1".into());
        }
        if self.x0_prior.len() != model.n_x() || !model.domains().x.contains(&self.x0_prior) {
            return bad(format!("initial prior {:?} is not in the state domain", self.x0_prior.as_slice()));
        }
        let check_v = |v: &Vector| v.len() == model.n_v() && model.domains().v.contains(v);
        let ok_v = match &self.v_prior {
            NoisePrior::Constant(v) => check_v(v),
            NoisePrior::PerStep(vs) => !vs.is_empty() && vs.iter().all(check_v),
        };
        if !ok_v {
            return bad("noise prior must lie in the noise domain".into());
        }
        match (&self.weights, self.scheme) {
            (Weights::Lyapunov(c), Scheme::Fie | Scheme::FullOrder) => c.validate()?,
            (Weights::ExpIoss(c), Scheme::TwoStage) => c.validate()?,
            (Weights::Baseline(b), Scheme::Baseline) => {
                let all = [b.p1, b.q_w, b.q_v, b.q_y];
                if !(b.mu > 0.0 && b.mu <= 1.0) || all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return bad("baseline weights must be nonnegative with mu in (0, 1]".into());
                }
            }
            (_, s) => return bad(format!("weights do not match scheme `{}`", s.name())),
        }
        if let Some(b) = &self.w_box {
            if b.dim() != model.n_w() {
                return bad("unknown-input box has the wrong dimension".into());
            }
        }
        Ok(())
    }

    /// Reads `<prefix>.*`. The weights are looked up under the section named
    /// by `<prefix>.weights`.
    pub fn from_config(cfg: &KvConfig, prefix: &str, model: &SystemModel) -> Result<Self, EstimatorError> {
        let k = |s: &str| format!("{prefix}.{s}");
        let scheme_s = cfg.get_str(&k("scheme"))?;
        let scheme = Scheme::parse(scheme_s).ok_or_else(|| ConfigError::Invalid {
            key: k("scheme"),
            msg: format!("unknown scheme `{scheme_s}` (fie, full-order, two-stage, baseline)"),
        })?;
        let wsec = cfg.get_str(&k("weights"))?.to_string();
        let weights = match scheme {
            Scheme::Fie | Scheme::FullOrder => Weights::Lyapunov(LyapunovCertificate::from_config(cfg, &wsec)?),
            Scheme::TwoStage => Weights::ExpIoss(ExpIossCertificate::from_config(cfg, &wsec)?),
            Scheme::Baseline => {
                let g = |s: &str| cfg.get_f64(&format!("{wsec}.{s}"));
                Weights::Baseline(BaselineWeights {
                    mu: g("mu")?,
                    p1: g("p1")?,
                    q_w: g("q_w")?,
                    q_v: g("q_v")?,
                    q_y: g("q_y")?,
                })
            }
        };
        let v_prior = match cfg.get_vector_opt(&k("v_prior"))? {
            Some(v) => NoisePrior::Constant(v),
            None => NoisePrior::Constant(Vector::zeros(model.n_v())),
        };
        let w_box = match (cfg.get_vector_opt(&k("w_lower"))?, cfg.get_vector_opt(&k("w_upper"))?) {
            (Some(l), Some(u)) => Some(BoxDomain::new(l, u).map_err(|e| ConfigError::Invalid {
                key: k("w_lower"),
                msg: e.to_string(),
            })?),
            (None, None) => None,
            _ => {
                return Err(EstimatorError::Invalid(format!("{prefix}: give both w_lower and w_upper or neither")))
            }
        };
        let c = Self {
            scheme,
            horizon: cfg.get_usize_or(&k("horizon"), 0)?,
            x0_prior: cfg.get_vector(&k("x0_prior"))?,
            v_prior,
            weights,
            solver: SolverOptions::from_config(cfg, &k("solver"))?,
            w_box,
            penalty_weight: cfg.get_f64_or(&k("penalty_weight"), DEFAULT_PENALTY_WEIGHT)?,
            project: cfg.get_bool_or(&k("project"), true)?,
        };
        c.validate(model)?;
        Ok(c)
    }
}

/// Outcome of one estimator step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    /// Nothing to optimize (empty window).
    Direct,
    Solver(SolverStatus),
    /// The solver rejected the problem; the warm start was kept.
    Error,
}

impl StepStatus {
    pub fn is_failure(self) -> bool {
        !matches!(self, StepStatus::Direct | StepStatus::Solver(SolverStatus::Converged))
    }

    pub fn label(self) -> String {
        match self {
            StepStatus::Direct => "direct".into(),
            StepStatus::Solver(s) => s.to_string(),
            StepStatus::Error => "error".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub k: usize,
    pub x_hat: Vector,
    pub cost: f64,
    pub status: StepStatus,
    pub iterations: usize,
    /// Seconds spent in the step, solver included.
    pub wall_time: f64,
    pub noises: Vec<Vector>,
    pub unknown_inputs: Vec<Vector>,
    pub z_sharp: Option<Vector>,
}

/// Rolling state of one estimator instance.
pub struct EstimatorState {
    cfg: EstimatorConfig,
    model: SystemModel,
    reduced: Option<ReducedModel>,
    /// Index of the next measurement.
    k: usize,
    outputs: VecDeque<Vector>,
    controls: VecDeque<Vector>,
    noise_priors: VecDeque<Vector>,
    /// Prior anchors indexed from `first_prior`: full estimates for the
    /// full-order schemes, reduced states for the two-stage scheme.
    priors: VecDeque<Vector>,
    first_prior: usize,
    warm: Option<(usize, WindowSolution)>,
}

impl EstimatorState {
    pub fn new(model: &SystemModel, cfg: EstimatorConfig, reduced: Option<ReducedModel>) -> Result<Self, EstimatorError> {
        cfg.validate(model)?;
        if cfg.scheme == Scheme::TwoStage && reduced.is_none() {
            return Err(EstimatorError::Invalid("two-stage scheme needs a reduced model".into()));
        }
        Ok(Self {
            cfg,
            model: model.clone(),
            reduced,
            k: 0,
            outputs: VecDeque::new(),
            controls: VecDeque::new(),
            noise_priors: VecDeque::new(),
            priors: VecDeque::new(),
            first_prior: 0,
            warm: None,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    /// Time index of the next measurement.
    pub fn time(&self) -> usize {
        self.k
    }

    /// Stored prior anchor for time `t`, if still held.
    pub fn prior_at(&self, t: usize) -> Option<&Vector> {
        t.checked_sub(self.first_prior).and_then(|i| self.priors.get(i))
    }

    fn window_len(&self) -> usize {
        match self.cfg.scheme {
            Scheme::Fie => self.k,
            _ => self.k.min(self.cfg.horizon),
        }
    }

    /// Consumes `y_k` (and `u_{k-1}` for `k > 0`) and returns `x̂_k`.
    pub fn step(&mut self, y: &Vector, u_prev: Option<&Vector>) -> Estimate {
        let t0 = Instant::now();
        let k = self.k;
        match (k, u_prev) {
            (0, _) => {}
            (_, Some(u)) => self.controls.push_back(u.clone()),
            (_, None) => self.controls.push_back(Vector::zeros(self.model.n_u())),
        }
        self.outputs.push_back(y.clone());
        self.noise_priors.push_back(self.cfg.v_prior.at(k));
        let n_k = self.window_len();
        while self.outputs.len() > n_k + 1 {
            self.outputs.pop_front();
            self.noise_priors.pop_front();
        }
        while self.controls.len() > n_k {
            self.controls.pop_front();
        }
        let mut est = match self.cfg.scheme {
            Scheme::Fie | Scheme::FullOrder => self.full_order(k, n_k),
            Scheme::TwoStage => self.two_stage(k, n_k),
            Scheme::Baseline => self.baseline(k, n_k),
        };
        let keep = self.cfg.horizon.max(n_k) + 1;
        while self.priors.len() > keep {
            self.priors.pop_front();
            self.first_prior += 1;
        }
        self.k += 1;
        est.wall_time = t0.elapsed().as_secs_f64();
        est
    }

    fn window(&self, prior: Vector) -> Window {
        Window {
            outputs: self.outputs.iter().cloned().collect(),
            controls: self.controls.iter().cloned().collect(),
            noise_priors: self.noise_priors.iter().cloned().collect(),
            prior,
        }
    }

    fn prior_for(&self, s: usize, initial: Vector) -> Vector {
        if s == 0 {
            initial
        } else {
            self.prior_at(s).cloned().expect("prior anchor retained for the window start")
        }
    }

    fn spec<'a>(&self, cost: CostForm<'a>) -> ShootingSpec<'a> {
        ShootingSpec {
            cost,
            penalty_weight: self.cfg.penalty_weight,
            w_box: self.cfg.w_box.clone(),
            fd_step: self.cfg.solver.fd_step,
        }
    }

    /// Previous window shifted to start at `s`, tails filled with priors.
    fn warm_start(&self, s: usize, n_k: usize, n_v_blocks: usize, n_w_blocks: usize, initial: Vector) -> (Vector, Vec<Vector>, Vec<Vector>) {
        let w_fill = self.w_fill();
        let Some((s_prev, sol)) = &self.warm else {
            let nv = (0..n_v_blocks).map(|i| self.noise_priors[i].clone()).collect();
            return (initial, nv, vec![w_fill; n_w_blocks]);
        };
        let shift = s - s_prev;
        let x0 = sol.states.get(shift).cloned().unwrap_or(initial);
        let mut nv: Vec<Vector> = sol.noises.iter().skip(shift).take(n_v_blocks).cloned().collect();
        while nv.len() < n_v_blocks {
            nv.push(self.noise_priors[nv.len().min(n_k)].clone());
        }
        let last_w = sol.unknown_inputs.last().cloned().unwrap_or(w_fill);
        let mut nw: Vec<Vector> = sol.unknown_inputs.iter().skip(shift).take(n_w_blocks).cloned().collect();
        while nw.len() < n_w_blocks {
            nw.push(last_w.clone());
        }
        (x0, nv, nw)
    }

    fn w_fill(&self) -> Vector {
        match &self.cfg.w_box {
            Some(b) => b.center(),
            None => self.model.reference_w(),
        }
    }

    fn full_order(&mut self, k: usize, n_k: usize) -> Estimate {
        let s = k - n_k;
        let Weights::Lyapunov(cert) = &self.cfg.weights else { unreachable!("validated") };
        let window = self.window(self.prior_for(s, self.cfg.x0_prior.clone()));
        let spec = self.spec(CostForm::FullOrder(cert));
        let (x0, nv, nw) = self.warm_start(s, n_k, n_k + 1, n_k, window.prior.clone());
        let (sol, est) = solve_window(&self.model, &window, &spec, &self.cfg.solver, &x0, &nv, &nw, k);
        let x_hat = sol.states.last().cloned().expect("window has states");
        self.priors.push_back(x_hat.clone());
        self.warm = Some((s, sol));
        Estimate { x_hat, ..est }
    }

    fn baseline(&mut self, k: usize, n_k: usize) -> Estimate {
        if k == 0 {
            let x_hat = self.cfg.x0_prior.clone();
            self.priors.push_back(x_hat.clone());
            return direct(k, x_hat, None);
        }
        let s = k - n_k;
        let Weights::Baseline(bw) = self.cfg.weights.clone() else { unreachable!("validated") };
        let window = self.window(self.prior_for(s, self.cfg.x0_prior.clone()));
        let spec = self.spec(CostForm::Baseline(bw));
        let (x0, nv, nw) = self.warm_start(s, n_k, n_k, n_k, window.prior.clone());
        let (sol, est) = solve_window(&self.model, &window, &spec, &self.cfg.solver, &x0, &nv, &nw, k);
        let x_hat = sol.states.last().cloned().expect("window has states");
        self.priors.push_back(x_hat.clone());
        self.warm = Some((s, sol));
        Estimate { x_hat, ..est }
    }

    fn two_stage(&mut self, k: usize, n_k: usize) -> Estimate {
        let red = self.reduced.clone().expect("validated");
        let t = red.transform();
        let y_k = self.outputs.back().cloned().expect("pushed");
        let v_k = self.noise_priors.back().cloned().expect("pushed");
        let (z_k, est) = if k == 0 {
            (t.sharp(&self.cfg.x0_prior), direct(k, Vector::zeros(0), None))
        } else {
            let s = k - n_k;
            let Weights::ExpIoss(cert) = &self.cfg.weights else { unreachable!("validated") };
            let window = self.window(self.prior_for(s, t.sharp(&self.cfg.x0_prior)));
            let spec = self.spec(CostForm::TwoStage(&red, cert));
            let (z0, nv, _) = self.warm_start(s, n_k, n_k, 0, window.prior.clone());
            let (sol, est) = solve_window(&self.model, &window, &spec, &self.cfg.solver, &z0, &nv, &[], k);
            let z_k = sol.states.last().cloned().expect("window has states");
            self.warm = Some((s, sol));
            (z_k, est)
        };
        let candidate = recover_full_state(t, &y_k, &z_k, &v_k);
        let x_hat = match (self.cfg.project, t.domain_image()) {
            (true, Some(img)) => project_estimate(t, &t.apply(&candidate), img),
            _ => candidate,
        };
        self.priors.push_back(z_k.clone());
        Estimate {
            x_hat,
            z_sharp: Some(z_k),
            ..est
        }
    }
}

fn direct(k: usize, x_hat: Vector, z: Option<Vector>) -> Estimate {
    Estimate {
        k,
        x_hat,
        cost: 0.0,
        status: StepStatus::Direct,
        iterations: 0,
        wall_time: 0.0,
        noises: Vec::new(),
        unknown_inputs: Vec::new(),
        z_sharp: z,
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_window(
    model: &SystemModel,
    window: &Window,
    spec: &ShootingSpec,
    opts: &SolverOptions,
    x0: &Vector,
    nv: &[Vector],
    nw: &[Vector],
    k: usize,
) -> (WindowSolution, Estimate) {
    let obj = match build_shooting_objective(model, window, spec) {
        Ok(o) => o,
        Err(e) => panic!("window transcription failed at k = {k}: {e}"),
    };
    let theta0 = obj.pack(x0, nv, nw);
    let p = obj.problem();
    let (theta, cost, status, iterations) = match solve_box_nlp(&p, &theta0, opts) {
        Ok(s) => (s.argmin, s.cost, StepStatus::Solver(s.status), s.iterations),
        Err(_) => {
            let t = p.project(&theta0);
            let c = obj.cost(&t);
            (t, c, StepStatus::Error, 0)
        }
    };
    let sol = obj.decode(&theta);
    let est = Estimate {
        k,
        x_hat: Vector::zeros(0),
        cost,
        status,
        iterations,
        wall_time: 0.0,
        noises: sol.noises.clone(),
        unknown_inputs: sol.unknown_inputs.clone(),
        z_sharp: None,
    };
    (sol, est)
}

fn expect_scheme(st: &EstimatorState, s: &[Scheme]) {
    assert!(s.contains(&st.cfg.scheme), "estimator is configured as `{}`", st.cfg.scheme.name());
}

/// Full information step over the whole history.
pub fn fie_step(st: &mut EstimatorState, y: &Vector, u_prev: Option<&Vector>) -> Estimate {
    expect_scheme(st, &[Scheme::Fie]);
    st.step(y, u_prev)
}

/// Full-order MHE step including the current measurement.
pub fn mhe_full_step(st: &mut EstimatorState, y: &Vector, u_prev: Option<&Vector>) -> Estimate {
    expect_scheme(st, &[Scheme::FullOrder]);
    st.step(y, u_prev)
}

/// Reduced-order MHE followed by full-state recovery from `y_k`.
pub fn two_stage_step(st: &mut EstimatorState, y: &Vector, u_prev: Option<&Vector>) -> Estimate {
    expect_scheme(st, &[Scheme::TwoStage]);
    st.step(y, u_prev)
}

/// One-step-ahead discounted MHE treating `w` as a penalized disturbance.
pub fn standard_mhe_step(st: &mut EstimatorState, y: &Vector, u_prev: Option<&Vector>) -> Estimate {
    expect_scheme(st, &[Scheme::Baseline]);
    st.step(y, u_prev)
}
