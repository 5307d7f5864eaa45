use serde::Serialize;

use super::{ExperimentConfig, HarnessError, ModelKind};
use crate::detectability::{
    check_exp_ioss, check_linear_strong_detectability, check_lyapunov_certificate, min_horizon_full_order,
    min_horizon_two_stage, ExpIossCertificate, ExpIossSampling, GridSpec, LinearDetectReport, LyapunovCertificate,
    VerificationReport,
};
use crate::estimators::{Scheme, Weights};

#[derive(Clone, Debug, Serialize)]
pub struct DetectSummary {
    pub linear: Option<LinearDetectReport>,
    pub lyapunov: Option<VerificationReport>,
    pub exp_ioss: Option<VerificationReport>,
}

/// Runs the checks configured under `detect.*`: the rank/Schur test for
/// linear models, the dissipation falsifier for the certificate section named
/// by `detect.lyapunov` on the `grid.*` grid and the exponential i-IOSS
/// falsifier for `detect.exp_ioss` on the `ioss.*` sampling.
pub fn check_detect(cfg: &ExperimentConfig) -> Result<DetectSummary, HarnessError> {
    let raw = &cfg.raw;
    let linear = match &cfg.kind {
        ModelKind::Linear(s) => Some(check_linear_strong_detectability(&s.a, &s.b, &s.c, None)?),
        ModelKind::Crop(_) => None,
    };
    let lyapunov = match raw.get_opt_str("detect.lyapunov") {
        Some(sec) => {
            let cert = LyapunovCertificate::from_config(raw, sec)?;
            let grid = GridSpec::from_config(raw, "grid", &cfg.model)?;
            Some(check_lyapunov_certificate(&cfg.model, &cert, &grid)?)
        }
        None => None,
    };
    let exp_ioss = match raw.get_opt_str("detect.exp_ioss") {
        Some(sec) => {
            let red = cfg
                .reduced
                .as_ref()
                .ok_or_else(|| HarnessError::Config("no reduced model for the i-IOSS check".into()))?;
            let cert = ExpIossCertificate::from_config(raw, sec)?;
            let sampling = ExpIossSampling::from_config(raw, "ioss", red)?;
            Some(check_exp_ioss(red, &cert, &sampling.pairs(red))?)
        }
        None => None,
    };
    Ok(DetectSummary {
        linear,
        lyapunov,
        exp_ioss,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HorizonRow {
    pub estimator: String,
    pub scheme: String,
    pub configured: usize,
    /// `None` for schemes without a horizon condition or when infeasible.
    pub minimal: Option<usize>,
    pub sufficient: Option<bool>,
}

/// Minimal horizons of the configured estimators; `detect.rho` (default 0.5)
/// is the contraction target of the full-order condition.
pub fn horizons(cfg: &ExperimentConfig) -> Result<Vec<HorizonRow>, HarnessError> {
    let rho = cfg.raw.get_f64_or("detect.rho", 0.5)?;
    let mut rows = vec![];
    for e in &cfg.estimators {
        let minimal = match (&e.config.weights, e.config.scheme) {
            (Weights::Lyapunov(c), Scheme::FullOrder) => min_horizon_full_order(c, rho)?,
            (Weights::ExpIoss(c), Scheme::TwoStage) => Some(min_horizon_two_stage(c)?),
            _ => None,
        };
        rows.push(HorizonRow {
            estimator: e.name.clone(),
            scheme: e.config.scheme.name().into(),
            configured: e.config.horizon,
            minimal,
            sufficient: minimal.map(|m| e.config.horizon >= m),
        });
    }
    Ok(rows)
}
