mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use uise::config::KvConfig;
use uise::detectability::{
    check_exp_ioss, check_lyapunov_pairs, dissipation_sides, min_horizon_full_order, min_horizon_two_stage,
    ExpIossCertificate, ExpIossSampling, GridSpec, LyapunovCertificate, Verdict,
};
use uise::harness::ExperimentConfig;
use uise::model::{BoxDomain, Domains, InputDomain, SystemModel, Vector};

fn lyap(mu: f64, a1: f64, a2: f64, s: f64) -> LyapunovCertificate {
    LyapunovCertificate {
        p: DMatrix::identity(1, 1),
        mu,
        a1,
        a2,
        s_v: s,
        s_y: s,
    }
}

fn ioss(mu: f64, c_x: f64) -> ExpIossCertificate {
    ExpIossCertificate {
        mu,
        c_x,
        c_v: 1.0,
        c_y: 1.0,
        c_gamma: 0.0,
    }
}

/// `x⁺ = a x + w`, `y = x + v` on `|x| ≤ 1`, `|w| ≤ 0.5`, `|v| ≤ 0.1`.
fn scalar_model(a: f64) -> SystemModel {
    let b = |r: f64| BoxDomain::symmetric(&[r]).unwrap();
    SystemModel::new(
        "scalar",
        move |x, _u, w| Vector::from_vec(vec![a * x[0] + w[0]]),
        |x, v| Vector::from_vec(vec![x[0] + v[0]]),
        Domains {
            x: b(1.0),
            u: BoxDomain::point(&Vector::zeros(1)),
            w: InputDomain::Bounded(b(0.5)),
            v: b(0.1),
            y: b(10.0),
        },
    )
    .unwrap()
}

fn scalar_grid(seed: u64) -> GridSpec {
    GridSpec {
        base_per_axis: 5,
        directions: vec![Vector::from_vec(vec![1.0])],
        scales: vec![0.05, 0.3],
        w_levels: 3,
        w_surrogate: None,
        noise_samples: 2,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn full_order_horizon_is_minimal_and_monotone(
        mu in 0.05f64..0.95, a1 in 0.5f64..2.0, ratio in 1.0f64..4.0, rho in 0.05f64..0.95, drho in 0.0f64..0.5,
    ) {
        let c = lyap(mu, a1, a1 * ratio, 0.0);
        let holds = |n: i32| 8.0 * mu.powi(n) * ratio < rho;
        let n = min_horizon_full_order(&c, rho).unwrap().expect("finite horizon") as i32;
        prop_assert!(holds(n));
        prop_assert!(n == 1 || !holds(n - 1));
        let looser = (rho + drho).min(0.99);
        prop_assert!(min_horizon_full_order(&c, looser).unwrap().unwrap() as i32 <= n);
        let slower = lyap((mu + 0.02).min(0.97), a1, a1 * ratio, 0.0);
        prop_assert!(min_horizon_full_order(&slower, rho).unwrap().unwrap() as i32 >= n);
    }

    #[test]
    fn two_stage_horizon_is_minimal_and_monotone(mu in 0.05f64..0.95, c_x in 0.3f64..50.0, dc in 0.0f64..5.0) {
        // 4 c_x μᴺ < 1 is the same condition without logarithms
        let holds = |n: i32| 4.0 * c_x * mu.powi(n) < 1.0;
        let n = min_horizon_two_stage(&ioss(mu, c_x)).unwrap() as i32;
        prop_assert!(n >= 1);
        prop_assert!(holds(n));
        prop_assert!(n == 1 || !holds(n - 1));
        prop_assert!(min_horizon_two_stage(&ioss(mu, c_x + dc)).unwrap() as i32 >= n);
    }

    #[test]
    fn falsifier_agrees_with_pointwise_evaluation(
        a in -1.2f64..1.2, mu in 0.05f64..0.95, s in 0.0f64..3.0, seed in 0u64..1000,
    ) {
        let m = scalar_model(a);
        let cert = lyap(mu, 1.0, 1.0, s);
        let (pairs, scope) = scalar_grid(seed).pairs(&m).unwrap();
        let report = check_lyapunov_pairs(&m, &cert, &pairs, scope).unwrap();
        let violated = pairs.iter().any(|q| match dissipation_sides(&m, &cert, q) {
            Some((l, r)) => l - r > 1e-9 * l.abs().max(r.abs()),
            None => false,
        });
        prop_assert_eq!(report.verdict == Verdict::Falsified, violated);
        if let Some(cx) = &report.counterexample {
            let (lhs, rhs) = common::reevaluate_dissipation(&m, &cert, cx);
            prop_assert!(lhs > rhs, "counterexample does not violate: {} <= {}", lhs, rhs);
            prop_assert!((lhs - cx.lhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            prop_assert!((rhs - cx.rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}

#[test]
fn linear_checker_matches_simulation_oracle() {
    let r = common::linear_checker_disagreements(2024, 100);
    assert_eq!(r.cases, 110);
    assert!(r.disagreements.is_empty(), "disagreements:\n{}", r.disagreements.join("\n"));
    // both verdicts are well represented
    assert!(r.detectable > 25 && r.detectable < 85, "{} detectable", r.detectable);
}

#[test]
fn edge_case_verdicts() {
    let expected = [true, false, false, false, false, true, true, false, false, true];
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for ((name, a, b, c), want) in common::linear_edge_cases().into_iter().zip(expected) {
        assert_eq!(common::linear_oracle(&a, &b, &c, &mut rng), want, "{name}");
    }
}

/// `x₁⁺ = w`, `x₂⁺ = 0.5 x₂`, `y = x₁ + v`: the reduced state is `x₂` up to
/// scale, so reduced errors shrink by 0.25 per step in the squared norm.
fn decoupled_two_state() -> ExperimentConfig {
    let text = "
        model = linear
        linear.a = [0, 0; 0, 0.5]
        linear.b = [1; 0]
        linear.c = [1, 0]
        linear.x_lower = [-1, -1]
        linear.x_upper = [1, 1]
        linear.v_lower = [-0.01]
        linear.v_upper = [0.01]
        linear.w_lower = [-0.5]
        linear.w_upper = [0.5]
        run.steps = 10
        run.x0 = [0, 0]
        run.w = [0]
    ";
    ExperimentConfig::from_kv(KvConfig::parse(text).unwrap()).unwrap()
}

fn decoupled_sampling(cfg: &ExperimentConfig) -> ExpIossSampling {
    let red = cfg.reduced.as_ref().unwrap();
    let mut kv = KvConfig::new();
    kv.set("ioss.trajectories", "3");
    kv.set("ioss.length", "8");
    kv.set("ioss.scales", "[0.1, 0.3]");
    ExpIossSampling::from_config(&kv, "ioss", red).unwrap()
}

#[test]
fn exp_ioss_decoupled_example() {
    let cfg = decoupled_two_state();
    let red = cfg.reduced.as_ref().unwrap();
    assert_eq!(red.n_sharp(), 1);
    let pairs = decoupled_sampling(&cfg).pairs(red);
    assert!(!pairs.is_empty());

    let ok = check_exp_ioss(red, &ioss(0.5, 1.0), &pairs).unwrap();
    assert_eq!(ok.verdict, Verdict::CertifiedOnGrid);

    let bad = check_exp_ioss(red, &ioss(0.2, 1.0), &pairs).unwrap();
    assert_eq!(bad.verdict, Verdict::Falsified);
    let cx = bad.counterexample.unwrap();
    assert_eq!(cx.step, Some(1));
    // Δz₁² = 0.25 Δz₀² against 0.2 Δz₀²
    assert!((cx.lhs / cx.rhs - 1.25).abs() < 1e-9, "{} / {}", cx.lhs, cx.rhs);
}
