use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_atomic, ExperimentConfig, HarnessError, NamedEstimator, NoiseRegime, TruthInput};
use crate::crop::unknown_input_truth;
use crate::estimators::{Estimate, EstimatorState};
use crate::model::{fmt_f64, simulate_with, Trajectory, Vector};
use crate::noise::sample_uniform_noise;

pub const TRUTH_FILE: &str = "truth.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "plot_data.csv";

pub fn estimates_file(name: &str) -> String {
    format!("estimates_{name}.csv")
}

/// The true trajectory of `cfg` under `regime`.
pub fn simulate_truth(cfg: &ExperimentConfig, regime: NoiseRegime, seed: Option<u64>) -> Result<Trajectory, HarnessError> {
    let k = cfg.steps;
    let noises = match (regime, seed) {
        (NoiseRegime::Noiseless, _) => vec![Vector::zeros(cfg.model.n_v()); k + 1],
        (NoiseRegime::Noisy, Some(s)) => sample_uniform_noise(&cfg.model.domains().v, k + 1, s)?,
        (NoiseRegime::Noisy, None) => return Err(HarnessError::Config("noisy runs need a seed".into())),
    };
    let controls = vec![cfg.control.clone(); k];
    let truth_w = cfg.truth_w.clone();
    Ok(simulate_with(
        &cfg.model,
        &cfg.x0,
        &controls,
        move |_, x| match &truth_w {
            TruthInput::CropWeight => Vector::from_element(1, unknown_input_truth(x[2])),
            TruthInput::Constant(w) => w.clone(),
        },
        &noises,
    )?)
}

/// SHA-256 of the output sequence, little-endian bytes in order.
pub fn measurement_hash<'a>(outputs: impl IntoIterator<Item = &'a Vector>) -> String {
    let mut h = Sha256::new();
    for y in outputs {
        for v in y.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// One estimator over the whole truth.
#[derive(Clone, Debug)]
pub struct EstimatorRun {
    pub name: String,
    pub estimates: Vec<Estimate>,
    pub errors: Vec<f64>,
    pub measurement_hash: String,
}

pub(super) fn run_estimator(
    cfg: &ExperimentConfig,
    est: &NamedEstimator,
    truth: &Trajectory,
) -> Result<EstimatorRun, HarnessError> {
    let mut config = est.config.clone();
    if est.derived_prior {
        config.x0_prior = cfg.derive_prior(&truth.outputs[0]);
    }
    let mut st = EstimatorState::new(&cfg.model, config, cfg.reduced.clone())?;
    let mut estimates = Vec::with_capacity(truth.outputs.len());
    let mut consumed = Vec::with_capacity(truth.outputs.len());
    for (k, y) in truth.outputs.iter().enumerate() {
        consumed.push(y);
        estimates.push(st.step(y, k.checked_sub(1).map(|j| &truth.controls[j])));
    }
    let errors = estimates
        .iter()
        .zip(&truth.states)
        .map(|(e, x)| (&e.x_hat - x).norm())
        .collect();
    Ok(EstimatorRun {
        name: est.name.clone(),
        estimates,
        errors,
        measurement_hash: measurement_hash(consumed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallTimeStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub scheme: String,
    pub measurement_hash: String,
    pub final_error: f64,
    pub max_error: f64,
    pub mean_error: f64,
    /// Maximum over the last tenth of the run.
    pub tail_max_error: f64,
    pub wall_time: WallTimeStats,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub steps: usize,
    pub regime: String,
    pub seed: Option<u64>,
    pub measurement_hash: String,
    pub state_labels: Vec<String>,
    pub w_labels: Vec<String>,
    pub plot_state: usize,
    pub estimators: Vec<EstimatorSummary>,
}

impl EstimatorSummary {
    /// Statistics of per-step error norms, wall times in ms and failure flags.
    pub fn from_columns(
        name: &str,
        scheme: &str,
        hash: &str,
        errors: &[f64],
        wall_ms: &[f64],
        failures: usize,
    ) -> Self {
        let n = errors.len();
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let tail = (n / 10).max(1).min(n);
        Self {
            name: name.to_string(),
            scheme: scheme.to_string(),
            measurement_hash: hash.to_string(),
            final_error: errors.last().copied().unwrap_or(0.0),
            max_error: max(errors),
            mean_error: mean(errors),
            tail_max_error: max(&errors[n - tail..]),
            wall_time: WallTimeStats {
                mean_ms: mean(wall_ms),
                max_ms: max(wall_ms),
                total_ms: wall_ms.iter().sum(),
            },
            failures,
        }
    }
}

/// Files and in-memory results of one run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    /// Empty when loaded from disk.
    pub truth: Option<Trajectory>,
    pub runs: Vec<EstimatorRun>,
}

impl RunArtifacts {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = dir.as_ref().join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let summary = serde_json::from_str(&text).map_err(|e| HarnessError::io(&path, e.into()))?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            summary,
            truth: None,
            runs: vec![],
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn run(&self, name: &str) -> Option<&EstimatorRun> {
        self.runs.iter().find(|r| r.name == name)
    }

    /// Whether some estimator failed on more than `threshold` of its steps.
    pub fn failures_exceed(&self, threshold: f64) -> bool {
        let n = (self.summary.steps + 1) as f64;
        self.summary.estimators.iter().any(|e| e.failures as f64 > threshold * n)
    }
}

/// Simulates the truth once, runs every estimator on it and writes the
/// artifacts to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    let truth = simulate_truth(cfg, cfg.regime, cfg.seed)?;
    let runs: Vec<EstimatorRun> = if cfg.parallel {
        cfg.estimators
            .par_iter()
            .map(|e| run_estimator(cfg, e, &truth))
            .collect::<Result<_, _>>()?
    } else {
        cfg.estimators
            .iter()
            .map(|e| run_estimator(cfg, e, &truth))
            .collect::<Result<_, _>>()?
    };

    let dir = cfg.out_dir.clone();
    let mut buf = Vec::new();
    truth
        .write_csv(&mut buf, &cfg.labels)
        .map_err(|e| HarnessError::io(dir.join(TRUTH_FILE), e))?;
    write_atomic(&dir.join(TRUTH_FILE), &buf)?;

    let mut summaries = Vec::new();
    for (run, est) in runs.iter().zip(&cfg.estimators) {
        let text = estimates_csv(run, &cfg.labels.x);
        write_atomic(&dir.join(estimates_file(&run.name)), text.as_bytes())?;
        // statistics from the values exactly as written
        let wall_ms: Vec<f64> = run.estimates.iter().map(|e| e.wall_time * 1e3).collect();
        let failures = run.estimates.iter().filter(|e| e.status.is_failure()).count();
        summaries.push(EstimatorSummary::from_columns(
            &run.name,
            est.config.scheme.name(),
            &run.measurement_hash,
            &run.errors,
            &wall_ms,
            failures,
        ));
    }
    write_atomic(&dir.join(ERRORS_FILE), errors_csv(&runs, truth.states.len()).as_bytes())?;

    let summary = RunSummary {
        model: cfg.model_name().to_string(),
        steps: cfg.steps,
        regime: cfg.regime.name().to_string(),
        seed: cfg.seed,
        measurement_hash: measurement_hash(&truth.outputs),
        state_labels: cfg.labels.x.clone(),
        w_labels: cfg.labels.w.clone(),
        plot_state: cfg.plot_state,
        estimators: summaries,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join(SUMMARY_FILE), json.as_bytes())?;
    Ok(RunArtifacts {
        dir,
        summary,
        truth: Some(truth),
        runs,
    })
}

fn estimates_csv(run: &EstimatorRun, state_labels: &[String]) -> String {
    let mut out = String::from("k");
    for l in state_labels {
        out.push_str(&format!(",{l}_hat"));
    }
    out.push_str(",cost,status,wall_time_ms\n");
    for e in &run.estimates {
        let mut fields = vec![e.k.to_string()];
        fields.extend(e.x_hat.iter().map(|v| fmt_f64(*v)));
        fields.push(fmt_f64(e.cost));
        fields.push(e.status.label());
        fields.push(fmt_f64(e.wall_time * 1e3));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn errors_csv(runs: &[EstimatorRun], len: usize) -> String {
    let mut out = String::from("k");
    for r in runs {
        out.push_str(&format!(",{}", r.name));
    }
    out.push('\n');
    for k in 0..len {
        out.push_str(&k.to_string());
        for r in runs {
            out.push(',');
            out.push_str(&fmt_f64(r.errors[k]));
        }
        out.push('\n');
    }
    out
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), HarnessError> {
    let to_io = |e: csv::Error| HarnessError::io(path, e.into());
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(to_io)?.iter().map(str::to_string).collect();
    let rows = rdr.records().collect::<Result<_, _>>().map_err(to_io)?;
    Ok((header, rows))
}

fn column(path: &Path, header: &[String], rows: &[csv::StringRecord], name: &str) -> Result<Vec<f64>, HarnessError> {
    let bad = |m: String| HarnessError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, m));
    let i = header.iter().position(|h| h == name).ok_or_else(|| bad(format!("no column `{name}`")))?;
    rows.iter()
        .map(|r| {
            r.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad(format!("bad value in column `{name}`")))
        })
        .collect()
}

/// Writes `k,series,value` rows: the true plotted state and unknown input,
/// then per estimator its plotted state estimate and error norm.
pub fn emit_plot_data(art: &RunArtifacts) -> Result<PathBuf, HarnessError> {
    let s = &art.summary;
    let state = &s.state_labels[s.plot_state];
    let truth_path = art.path(TRUTH_FILE);
    let (th, trows) = read_table(&truth_path)?;
    let ks = column(&truth_path, &th, &trows, "k")?;

    let mut series: Vec<(String, Vec<f64>)> = vec![(format!("truth:{state}"), column(&truth_path, &th, &trows, state)?)];
    for w in &s.w_labels {
        series.push((format!("truth:{w}"), column(&truth_path, &th, &trows, w)?));
    }
    if !s.estimators.is_empty() {
        let err_path = art.path(ERRORS_FILE);
        let (eh, erows) = read_table(&err_path)?;
        for e in &s.estimators {
            let p = art.path(&estimates_file(&e.name));
            let (h, rows) = read_table(&p)?;
            series.push((format!("{}:{state}", e.name), column(&p, &h, &rows, &format!("{state}_hat"))?));
            series.push((format!("{}:error", e.name), column(&err_path, &eh, &erows, &e.name)?));
        }
    }

    let mut out = String::from("k,series,value\n");
    for (name, values) in &series {
        for (k, v) in ks.iter().zip(values) {
            out.push_str(&format!("{},{name},{}\n", *k as usize, fmt_f64(*v)));
        }
    }
    let path = art.path(PLOT_FILE);
    write_atomic(&path, out.as_bytes())?;
    Ok(path)
}
