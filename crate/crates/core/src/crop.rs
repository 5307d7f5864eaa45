//! Simplified indoor-farm crop-growth process.
//!
//! State `x = (x_c, x_d1, x_d2)`: CO₂ concentration and the dry weight of two
//! crop types. Control `u = (u_d)`: temperature in °C. Scalar unknown input
//! `w`, noise `v = (v_c, v_d)`, output `y = (x_c + v_c, x_d1 + x_d2 + v_d)`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::config::{ConfigError, KvConfig};
use crate::model::{BoxDomain, ColumnLabels, Domains, InputDomain, ModelError, SystemModel, Vector};
use crate::transform::{build_affine_transform, StateTransform, TransformError};

/// Bound on each noise component.
pub const NOISE_BOUND: f64 = 3e-6;
/// A-priori known range of the unknown input.
pub const W_RANGE: (f64, f64) = (0.965, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct CropParams {
    /// Sampling time [s].
    pub dt: f64,
    pub a_c1: f64,
    pub a_c2: f64,
    pub xi1: f64,
    pub a_d1: f64,
    pub a_d2: f64,
    pub a_d3: f64,
    pub a_d4: f64,
    /// Light-use efficiency [kg J⁻¹]; the photosynthesis expression assumes a
    /// fixed 100 W m⁻² radiation level.
    pub c_rad_phot: f64,
    /// CO₂ compensation point [kg m⁻³].
    pub c_gamma: f64,
    pub c_co2_1: f64,
    pub c_co2_2: f64,
    pub c_co2_3: f64,
    /// Temperature [°C].
    pub u_d: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        let a_c1 = 1.0 / 4.1;
        Self {
            dt: 60.0,
            a_c1,
            a_c2: 4.87e-7 * a_c1,
            xi1: 53.0,
            a_d1: 0.544,
            a_d2: 2.65e-7,
            a_d3: 0.8,
            a_d4: 1.85e-7,
            // lettuce greenhouse model constants
            c_rad_phot: 3.55e-9,
            c_gamma: 5.2e-5,
            c_co2_1: 5.11e-6,
            c_co2_2: 2.3e-4,
            c_co2_3: 6.29e-4,
            u_d: 25.0,
        }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.dt > 0.0) {
            return Err(ModelError::Numeric(format!("dt must be positive, got {}", self.dt)));
        }
        let all = [
            self.a_c1, self.a_c2, self.xi1, self.a_d1, self.a_d2, self.a_d3, self.a_d4, self.c_rad_phot,
            self.c_gamma, self.c_co2_1, self.c_co2_2, self.c_co2_3, self.u_d,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric("crop parameters must be finite".into()));
        }
        Ok(())
    }

    /// Reads `<prefix>.<field>` for every field; absent keys keep the default.
    pub fn from_config(cfg: &KvConfig, prefix: &str) -> Result<Self, ConfigError> {
        let mut p = Self::default();
        for (name, slot) in p.fields_mut() {
            *slot = cfg.get_f64_or(&format!("{prefix}.{name}"), *slot)?;
        }
        p.validate().map_err(|e| ConfigError::Invalid {
            key: prefix.to_string(),
            msg: e.to_string(),
        })?;
        Ok(p)
    }

    pub fn write_config(&self, cfg: &mut KvConfig, prefix: &str) {
        let mut p = self.clone();
        for (name, slot) in p.fields_mut() {
            cfg.set_f64(format!("{prefix}.{name}"), *slot);
        }
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut f64); 14] {
        [
            ("dt", &mut self.dt),
            ("a_c1", &mut self.a_c1),
            ("a_c2", &mut self.a_c2),
            ("xi1", &mut self.xi1),
            ("a_d1", &mut self.a_d1),
            ("a_d2", &mut self.a_d2),
            ("a_d3", &mut self.a_d3),
            ("a_d4", &mut self.a_d4),
            ("c_rad_phot", &mut self.c_rad_phot),
            ("c_gamma", &mut self.c_gamma),
            ("c_co2_1", &mut self.c_co2_1),
            ("c_co2_2", &mut self.c_co2_2),
            ("c_co2_3", &mut self.c_co2_3),
            ("u_d", &mut self.u_d),
        ]
    }

    /// Canopy CO₂ conductance `φ_u(u_d)`.
    pub fn phi_u(&self, u_d: f64) -> f64 {
        -self.c_co2_1 * u_d * u_d + self.c_co2_2 * u_d - self.c_co2_3
    }
}

/// Photosynthesis rate `φ(u_d, x_c)`; errors when the denominator vanishes.
pub fn photosynthesis(u_d: f64, x_c: f64, p: &CropParams) -> Result<f64, ModelError> {
    let light = 100.0 * p.c_rad_phot;
    let co2 = (x_c - p.c_gamma) * p.phi_u(u_d);
    let den = light + co2;
    if den == 0.0 {
        return Err(ModelError::Numeric(format!(
            "photosynthesis denominator vanishes: 100*c_rad_phot = {light:e}, (x_c - c_gamma)*phi_u = {co2:e}"
        )));
    }
    Ok(light * co2 / den)
}

fn photosynthesis_raw(u_d: f64, x_c: f64, p: &CropParams) -> f64 {
    let light = 100.0 * p.c_rad_phot;
    let co2 = (x_c - p.c_gamma) * p.phi_u(u_d);
    light * co2 / (light + co2)
}

/// Ground-truth unknown input `W(x_d2) = 1 - exp(-45 x_d2)`.
pub fn unknown_input_truth(x_d2: f64) -> f64 {
    -(-45.0 * x_d2).exp_m1()
}

/// One step of the crop dynamics. Non-finite values propagate.
pub fn crop_step(x: &Vector, u_d: f64, w: f64, p: &CropParams) -> Vector {
    let (xc, xd1, xd2) = (x[0], x[1], x[2]);
    let phi = photosynthesis_raw(u_d, xc, p);
    let growth = (-p.xi1 * xd1).exp_m1();
    let temp = (0.1 * u_d - 2.5).exp2();
    let g1 = xd1 * temp;
    let g2 = xd2 * temp;
    Vector::from_vec(vec![
        xc + p.dt * p.a_c1 * (growth - w) * phi + p.dt * p.a_c2 * (g1 + g2),
        xd1 - p.dt * (p.a_d1 * growth * phi + p.a_d2 * g1),
        xd2 + p.dt * (p.a_d3 * phi * w - p.a_d4 * g2),
    ])
}

pub fn crop_output(x: &Vector, v: &Vector) -> Vector {
    Vector::from_vec(vec![x[0] + v[0], x[1] + x[2] + v[1]])
}

pub fn crop_state_domain() -> BoxDomain {
    BoxDomain::from_slices(&[0.0, 0.08, 0.08], &[0.0027, 0.1, 0.1]).expect("static box")
}

pub fn crop_noise_domain() -> BoxDomain {
    BoxDomain::symmetric(&[NOISE_BOUND, NOISE_BOUND]).expect("static box")
}

pub fn crop_w_box() -> BoxDomain {
    BoxDomain::from_slices(&[W_RANGE.0], &[W_RANGE.1]).expect("static box")
}

pub fn crop_domains(p: &CropParams) -> Domains {
    let x = crop_state_domain();
    Domains {
        y: BoxDomain::from_slices(
            &[-NOISE_BOUND, 0.16 - NOISE_BOUND],
            &[0.0027 + NOISE_BOUND, 0.2 + NOISE_BOUND],
        )
        .expect("static box"),
        x,
        u: BoxDomain::from_slices(&[p.u_d], &[p.u_d]).expect("static box"),
        w: InputDomain::Unbounded(1),
        v: crop_noise_domain(),
    }
}

/// The crop process as a [`SystemModel`]. The temperature is taken from the
/// control input, so `p.u_d` only fixes the control domain.
pub fn crop_model(p: &CropParams) -> Result<SystemModel, ModelError> {
    p.validate()?;
    let params = p.clone();
    SystemModel::new(
        "crop",
        move |x, u, w| crop_step(x, u[0], w[0], &params),
        crop_output,
        crop_domains(p),
    )
}

pub fn crop_labels() -> ColumnLabels {
    let s = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    ColumnLabels {
        x: s(&["x_c", "x_d1", "x_d2"]),
        u: s(&["u_d"]),
        w: s(&["w"]),
        v: s(&["v_c", "v_d"]),
        y: s(&["y_c", "y_d"]),
    }
}

/// Nominal initial state of the experiment.
pub fn crop_initial_state() -> Vector {
    Vector::from_vec(vec![0.0013, 0.09, 0.09])
}

/// Output matrix `C` of the quasi-state-affine form `y = C x + v`.
pub fn crop_output_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0])
}

/// Unknown-input direction `B` with `f₂ = Δt φ(u_d, x_c) w`.
pub fn crop_input_direction(p: &CropParams) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 1, &[-p.a_c1, 0.0, p.a_d3])
}

/// Transform synthesized from `C` and `B` with the state domain attached.
pub fn crop_transform(p: &CropParams) -> Result<StateTransform, TransformError> {
    build_affine_transform(
        &crop_output_matrix(),
        &crop_input_direction(p),
        Arc::new(|v: &Vector| v.clone()),
        None,
        None,
    )?
    .with_state_domain(&crop_state_domain(), None, None)
}

/// The hand-picked transform `(x_c, x_d1, a_d3/a_c1·x_c + x_d2)`.
pub fn crop_explicit_transform(p: &CropParams) -> Result<StateTransform, TransformError> {
    let t = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p.a_d3 / p.a_c1, 0.0, 1.0]);
    StateTransform::from_linear(
        t,
        1,
        &crop_output_matrix(),
        &crop_input_direction(p),
        Arc::new(|v: &Vector| v.clone()),
        None,
    )?
    .with_state_domain(&crop_state_domain(), None, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_config_roundtrip() {
        let p = CropParams { xi1: 50.0, ..CropParams::default() };
        let mut cfg = KvConfig::new();
        p.write_config(&mut cfg, "crop");
        assert_eq!(CropParams::from_config(&cfg, "crop").unwrap(), p);
        assert_eq!(CropParams::from_config(&KvConfig::new(), "crop").unwrap(), CropParams::default());
    }
    use crate::model::simulate_with;

    #[test]
    fn growth_term_vanishes_at_zero_weight() {
        let p = CropParams::default();
        // x_d1 = 0 removes the a_d1 term; only respiration remains.
        let x = Vector::from_vec(vec![0.0013, 0.0, 0.09]);
        let next = crop_step(&x, 25.0, 0.98, &p);
        assert_eq!(next[1], 0.0);
    }

    #[test]
    fn temperature_factor_is_one_at_25_degrees() {
        assert_eq!((0.1f64 * 25.0 - 2.5).exp2(), 1.0);
        let p = CropParams::default();
        let x = Vector::from_vec(vec![p.c_gamma, 0.09, 0.085]);
        // φ = 0 at the compensation point, leaving pure respiration g_j = x_dj
        let next = crop_step(&x, 25.0, 0.98, &p);
        assert!((next[1] - (0.09 - 60.0 * p.a_d2 * 0.09)).abs() < 1e-18);
        assert!((next[2] - (0.085 - 60.0 * p.a_d4 * 0.085)).abs() < 1e-18);
    }

    #[test]
    fn photosynthesis_zero_cases() {
        let p = CropParams::default();
        assert_eq!(photosynthesis(25.0, p.c_gamma, &p).unwrap(), 0.0);
        let q = CropParams {
            c_co2_1: 0.0,
            c_co2_2: 0.0,
            c_co2_3: 0.0,
            ..CropParams::default()
        };
        assert_eq!(photosynthesis(25.0, 0.0013, &q).unwrap(), 0.0);
    }

    #[test]
    fn photosynthesis_vanishing_denominator_is_reported() {
        let p = CropParams::default();
        // choose x_c with (x_c - c_gamma) phi_u = -100 c_rad_phot
        let xc = p.c_gamma - 100.0 * p.c_rad_phot / p.phi_u(25.0);
        let err = photosynthesis(25.0, xc, &p);
        match err {
            Err(ModelError::Numeric(msg)) => assert!(msg.contains("denominator")),
            Ok(v) => {
                // rounding may leave a tiny denominator; the rate is then huge
                assert!(v.abs() > 1e-3);
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn photosynthesis_matches_scalar_evaluation() {
        // independent evaluation with the default constants typed out
        let phi_u = -5.11e-6 * 625.0 + 2.3e-4 * 25.0 - 6.29e-4;
        let num = 100.0 * 3.55e-9 * (0.0013 - 5.2e-5) * phi_u;
        let den = 100.0 * 3.55e-9 + (0.0013 - 5.2e-5) * phi_u;
        let expected = num / den;
        let got = photosynthesis(25.0, 0.0013, &CropParams::default()).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn unknown_input_truth_values() {
        assert_eq!(unknown_input_truth(0.0), 0.0);
        assert!((unknown_input_truth(10.0) - 1.0).abs() < 1e-12);
        let w = unknown_input_truth(0.08);
        assert!((w - (1.0 - (-3.6f64).exp())).abs() < 1e-15);
        assert!((0.965..=1.0).contains(&w));
    }

    #[test]
    fn full_step_term_by_term() {
        let p = CropParams::default();
        let x = Vector::from_vec(vec![0.0013, 0.09, 0.09]);
        let w = 0.983;
        let phi_u = -5.11e-6 * 625.0 + 2.3e-4 * 25.0 - 6.29e-4;
        let phi = 3.55e-7 * (0.0013 - 5.2e-5) * phi_u / (3.55e-7 + (0.0013 - 5.2e-5) * phi_u);
        let f =(-53.0f64 * 0.09).exp() - 1.0;
        let xc = 0.0013 + 60.0 * (1.0 / 4.1) * (f - w) * phi + 60.0 * (4.87e-7 / 4.1) * (0.09 + 0.09);
        let xd1 = 0.09 - 60.0 * (0.544 * f * phi + 2.65e-7 * 0.09);
        let xd2 = 0.09 + 60.0 * (0.8 * phi * w - 1.85e-7 * 0.09);
        let next = crop_step(&x, 25.0, w, &p);
        assert!((next[0] - xc).abs() < 1e-15);
        assert!((next[1] - xd1).abs() < 1e-15);
        assert!((next[2] - xd2).abs() < 1e-15);
    }

    #[test]
    fn x_d1_update_ignores_w() {
        use rand::{Rng, SeedableRng};
        let p = CropParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        for _ in 0..100 {
            let x = Vector::from_vec(vec![
                rng.random_range(0.0..0.0027),
                rng.random_range(0.08..0.1),
                rng.random_range(0.08..0.1),
            ]);
            let w: f64 = rng.random_range(0.965..1.0);
            let d = (crop_step(&x, 25.0, w + h, &p)[1] - crop_step(&x, 25.0, w - h, &p)[1]) / (2.0 * h);
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn long_run_stays_near_the_domain() {
        let p = CropParams::default();
        let model = crop_model(&p).unwrap();
        let k = 2000;
        let u = vec![Vector::from_element(1, 25.0); k];
        let v = vec![Vector::zeros(2); k + 1];
        let traj = simulate_with(
            &model,
            &crop_initial_state(),
            &u,
            |_, x| Vector::from_element(1, unknown_input_truth(x[2]).clamp(W_RANGE.0, W_RANGE.1)),
            &v,
        )
        .unwrap();
        let inflated = crop_state_domain().inflate(0.05);
        for x in &traj.states {
            assert!(inflated.contains(x), "state {x} left the inflated domain");
        }
    }
}
