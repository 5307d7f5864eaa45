//! Experiment configuration, runs, timing benchmarks and plot data.
//!
//! Experiment files use the [`KvConfig`] format:
//!
//! * `model = crop | linear`; crop parameters under `crop.*`, the crop
//!   transform under `transform = svd | explicit`;
//! * linear models `x⁺ = A x + G u + B w`, `y = C x + v` under `linear.a`,
//!   `linear.b`, `linear.c`, optional `linear.g`, and the boxes
//!   `linear.{x,v,u,w,y}_{lower,upper}` (`w` unbounded and `y` derived when
//!   absent);
//! * the run under `run.*`: `steps`, `x0`, `u` (constant control), `w`
//!   (`crop` for the crop weight law or a constant vector), `noise`
//!   (`noiseless | noisy`), `seed`, `out`, `estimators` (comma-separated
//!   names), `failure_threshold`, `plot_state`, `parallel`;
//! * the initial prior of estimators without an explicit `x0_prior`:
//!   `run.prior_scale` multiplies `x₀` componentwise and the state indices in
//!   `run.prior_from_output` are replaced by the same-index entry of `y₀`;
//! * one section `estimator.<name>.*` per estimator (see
//!   [`EstimatorConfig::from_config`]).

mod bench;
mod checks;
mod run;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

pub use bench::{bench_timing, TimingRow, TimingTable};
pub use checks::{check_detect, horizons, DetectSummary, HorizonRow};
pub use run::{emit_plot_data, run_experiment, simulate_truth, EstimatorRun, EstimatorSummary, RunArtifacts, RunSummary};

use crate::config::{ConfigError, KvConfig};
use crate::crop::{crop_explicit_transform, crop_initial_state, crop_labels, crop_model, crop_transform, CropParams};
use crate::detectability::DetectError;
use crate::estimators::{EstimatorConfig, EstimatorError, Scheme};
use crate::linalg::Matrix;
use crate::model::{BoxDomain, ColumnLabels, Domains, InputDomain, ModelError, SystemModel, Vector};
use crate::transform::{
    build_affine_transform, linear_box_image, reduce_model, MapFn, ReducedModel, TransformError, WCheckSpec,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("simulation: {0}")]
    Model(#[from] ModelError),
}

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<EstimatorError> for HarnessError {
    fn from(e: EstimatorError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<TransformError> for HarnessError {
    fn from(e: TransformError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<DetectError> for HarnessError {
    fn from(e: DetectError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

/// Linear model matrices.
#[derive(Clone, Debug)]
pub struct LinearSpec {
    pub a: Matrix,
    /// Unknown-input direction.
    pub b: Matrix,
    pub c: Matrix,
    /// Control matrix.
    pub g: Matrix,
}

#[derive(Clone, Debug)]
pub enum ModelKind {
    Crop(CropParams),
    Linear(LinearSpec),
}

/// How the true unknown input is generated.
#[derive(Clone, Debug, PartialEq)]
pub enum TruthInput {
    /// `w_k = 1 − exp(−45 x_d2,k)`.
    CropWeight,
    Constant(Vector),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseRegime {
    Noiseless,
    Noisy,
}

impl NoiseRegime {
    pub fn name(self) -> &'static str {
        match self {
            NoiseRegime::Noiseless => "noiseless",
            NoiseRegime::Noisy => "noisy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedEstimator {
    pub name: String,
    pub config: EstimatorConfig,
    /// Whether `x0_prior` is derived from `x₀` and `y₀` at run time.
    pub derived_prior: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: ModelKind,
    pub model: SystemModel,
    pub labels: ColumnLabels,
    /// Present when the transform synthesis succeeds.
    pub reduced: Option<ReducedModel>,
    pub steps: usize,
    pub x0: Vector,
    pub control: Vector,
    pub truth_w: TruthInput,
    pub regime: NoiseRegime,
    pub seed: Option<u64>,
    pub prior_scale: Vector,
    pub prior_from_output: Vec<usize>,
    pub estimators: Vec<NamedEstimator>,
    pub out_dir: PathBuf,
    /// Largest tolerated fraction of failed solver steps per estimator.
    pub failure_threshold: f64,
    /// State component emitted by the plot data.
    pub plot_state: usize,
    pub parallel: bool,
    /// The parsed file, for the detectability checks.
    pub raw: KvConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| HarnessError::io(path.as_ref(), e))?;
        Self::from_kv(KvConfig::parse(&text)?)
    }

    pub fn from_kv(cfg: KvConfig) -> Result<Self, HarnessError> {
        let bad = |m: String| HarnessError::Config(m);
        let (kind, model, labels, reduced) = match cfg.get_str("model")? {
            "crop" => {
                let p = CropParams::from_config(&cfg, "crop")?;
                let model = crop_model(&p)?;
                let t = match cfg.get_opt_str("transform").unwrap_or("svd") {
                    "svd" => crop_transform(&p)?,
                    "explicit" => crop_explicit_transform(&p)?,
                    s => return Err(bad(format!("unknown transform `{s}` (svd, explicit)"))),
                };
                let red = reduce_model(&model, Arc::new(t), &WCheckSpec::default())?;
                (ModelKind::Crop(p), model, crop_labels(), Some(red))
            }
            "linear" => {
                let (spec, model) = linear_model(&cfg)?;
                let labels = ColumnLabels::generic(&model);
                let reduced = linear_reduced(&spec, &model);
                (ModelKind::Linear(spec), model, labels, reduced)
            }
            s => return Err(bad(format!("unknown model `{s}` (crop, linear)"))),
        };

        let n = model.n_x();
        let x0 = match (&kind, cfg.get_vector_opt("run.x0")?) {
            (_, Some(x)) => x,
            (ModelKind::Crop(_), None) => crop_initial_state(),
            (ModelKind::Linear(_), None) => return Err(bad("missing key `run.x0`".into())),
        };
        if x0.len() != n || !model.domains().x.contains(&x0) {
            return Err(bad("run.x0 must lie in the state domain".into()));
        }
        let control = match cfg.get_vector_opt("run.u")? {
            Some(u) => u,
            None => model.domains().u.center(),
        };
        if control.len() != model.n_u() || !model.domains().u.contains(&control) {
            return Err(bad("run.u must lie in the control domain".into()));
        }
        let truth_w = match cfg.get_opt_str("run.w") {
            Some("crop") => match kind {
                ModelKind::Crop(_) => TruthInput::CropWeight,
                _ => return Err(bad("run.w = crop needs the crop model".into())),
            },
            Some(_) => TruthInput::Constant(cfg.get_vector("run.w")?),
            None => match kind {
                ModelKind::Crop(_) => TruthInput::CropWeight,
                _ => TruthInput::Constant(Vector::zeros(model.n_w())),
            },
        };
        if let TruthInput::Constant(w) = &truth_w {
            if !model.domains().w.contains(w) {
                return Err(bad("run.w must lie in the unknown-input domain".into()));
            }
        }
        let regime = match cfg.get_opt_str("run.noise").unwrap_or("noiseless") {
            "noiseless" => NoiseRegime::Noiseless,
            "noisy" => NoiseRegime::Noisy,
            s => return Err(bad(format!("unknown noise regime `{s}` (noiseless, noisy)"))),
        };
        let seed = cfg.get_u64_opt("run.seed")?;
        if regime == NoiseRegime::Noisy && seed.is_none() {
            return Err(bad("noisy runs need `run.seed`".into()));
        }
        let prior_scale = cfg.get_vector_opt("run.prior_scale")?.unwrap_or_else(|| Vector::from_element(n, 1.0));
        if prior_scale.len() != n {
            return Err(bad("run.prior_scale has the wrong dimension".into()));
        }
        let prior_from_output: Vec<usize> = match cfg.get_vector_opt("run.prior_from_output")? {
            Some(v) => v.iter().map(|i| *i as usize).collect(),
            None => vec![],
        };
        if prior_from_output.iter().any(|&i| i >= n.min(model.n_y())) {
            return Err(bad("run.prior_from_output index out of range".into()));
        }

        let mut experiment = Self {
            kind,
            model,
            labels,
            reduced,
            steps: cfg.get_usize_or("run.steps", 600)?,
            x0,
            control,
            truth_w,
            regime,
            seed,
            prior_scale,
            prior_from_output,
            estimators: vec![],
            out_dir: PathBuf::from(cfg.get_opt_str("run.out").unwrap_or("results")),
            failure_threshold: cfg.get_f64_or("run.failure_threshold", 0.05)?,
            plot_state: cfg.get_usize_or("run.plot_state", 0)?,
            parallel: cfg.get_bool_or("run.parallel", true)?,
            raw: KvConfig::new(),
        };
        if experiment.plot_state >= n {
            return Err(bad("run.plot_state out of range".into()));
        }

        let names: Vec<String> = match cfg.get_opt_str("run.estimators") {
            Some(s) => s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
            None => vec![],
        };
        // validate against a placeholder prior; the real one may depend on y₀
        let placeholder = experiment.derive_prior(&experiment.model.h(&experiment.x0, &Vector::zeros(experiment.model.n_v())));
        for name in names {
            if experiment.estimators.iter().any(|e| e.name == name) {
                return Err(bad(format!("estimator `{name}` listed twice")));
            }
            let prefix = format!("estimator.{name}");
            let derived_prior = !cfg.contains(&format!("{prefix}.x0_prior"));
            let mut section = cfg.clone();
            if derived_prior {
                section.set_vector(format!("{prefix}.x0_prior"), &placeholder);
            }
            let config = EstimatorConfig::from_config(&section, &prefix, &experiment.model)?;
            if config.scheme == Scheme::TwoStage && experiment.reduced.is_none() {
                return Err(bad(format!("estimator `{name}`: no reduced model for this system")));
            }
            experiment.estimators.push(NamedEstimator {
                name,
                config,
                derived_prior,
            });
        }
        experiment.raw = cfg;
        Ok(experiment)
    }

    /// `x̄₀` from the prior rule of the run.
    pub fn derive_prior(&self, y0: &Vector) -> Vector {
        let mut p = self.x0.component_mul(&self.prior_scale);
        for &i in &self.prior_from_output {
            p[i] = y0[i];
        }
        self.model.domains().x.project(&p)
    }

    pub fn model_name(&self) -> &'static str {
        match self.kind {
            ModelKind::Crop(_) => "crop",
            ModelKind::Linear(_) => "linear",
        }
    }
}

fn linear_model(cfg: &KvConfig) -> Result<(LinearSpec, SystemModel), HarnessError> {
    let bad = |m: &str| HarnessError::Config(m.to_string());
    let a = cfg.get_matrix("linear.a")?;
    let b = cfg.get_matrix("linear.b")?;
    let c = cfg.get_matrix("linear.c")?;
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || c.ncols() != n {
        return Err(bad("linear.a must be square with linear.b and linear.c matching"));
    }
    let g = if cfg.contains("linear.g") {
        cfg.get_matrix("linear.g")?
    } else {
        Matrix::zeros(n, 1)
    };
    if g.nrows() != n {
        return Err(bad("linear.g must have as many rows as linear.a"));
    }
    let boxed = |name: &str, default: Option<BoxDomain>| -> Result<Option<BoxDomain>, HarnessError> {
        let l = cfg.get_vector_opt(&format!("linear.{name}_lower"))?;
        let u = cfg.get_vector_opt(&format!("linear.{name}_upper"))?;
        match (l, u) {
            (Some(l), Some(u)) => Ok(Some(BoxDomain::new(l, u)?)),
            (None, None) => Ok(default),
            _ => Err(HarnessError::Config(format!("give both linear.{name}_lower and linear.{name}_upper"))),
        }
    };
    let x = boxed("x", None)?.ok_or_else(|| bad("missing linear.x_lower/x_upper"))?;
    let v = boxed("v", None)?.ok_or_else(|| bad("missing linear.v_lower/v_upper"))?;
    let u = boxed("u", Some(BoxDomain::point(&Vector::zeros(g.ncols()))))?.expect("default given");
    let w = match boxed("w", None)? {
        Some(bw) => InputDomain::Bounded(bw),
        None => InputDomain::Unbounded(b.ncols()),
    };
    let y = match boxed("y", None)? {
        Some(y) => y,
        None => {
            let cx = linear_box_image(&c, &x);
            BoxDomain::new(cx.lower() + v.lower(), cx.upper() + v.upper())?
        }
    };
    if x.dim() != n || v.dim() != c.nrows() || u.dim() != g.ncols() || w.dim() != b.ncols() || y.dim() != c.nrows() {
        return Err(bad("linear domain dimensions do not match the matrices"));
    }
    let spec = LinearSpec { a, b, c, g };
    let s = spec.clone();
    let model = SystemModel::new(
        "linear",
        move |x, u, w| &s.a * x + &s.g * u + &s.b * w,
        {
            let c = spec.c.clone();
            move |x, v| &c * x + v
        },
        Domains { x, u, w, v, y },
    )?;
    Ok((spec, model))
}

fn linear_reduced(spec: &LinearSpec, model: &SystemModel) -> Option<ReducedModel> {
    let g: Arc<MapFn> = Arc::new(|v: &Vector| v.clone());
    let t = build_affine_transform(&spec.c, &spec.b, g, None, None)
        .ok()?
        .with_state_domain(&model.domains().x, None, None)
        .ok()?;
    if t.n_sharp() == 0 {
        return None;
    }
    reduce_model(model, Arc::new(t), &WCheckSpec::default()).ok()
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}
