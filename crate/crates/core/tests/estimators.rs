mod common;

use uise::estimators::{EstimatorState, Scheme, Weights};
use uise::harness::{simulate_truth, ExperimentConfig, NamedEstimator, NoiseRegime};
use uise::model::{Trajectory, Vector};
use uise::solver::shooting::{build_shooting_objective, CostForm, ShootingSpec, Window};
use uise::solver::solve_box_nlp;

const N: usize = 30;

fn crop(regime: NoiseRegime) -> (ExperimentConfig, Trajectory) {
    let cfg = ExperimentConfig::load(common::config_path("crop_noisy.conf")).unwrap();
    let truth = simulate_truth(&cfg, regime, cfg.seed).unwrap();
    (cfg, truth)
}

fn estimator<'a>(cfg: &'a ExperimentConfig, name: &str) -> &'a NamedEstimator {
    cfg.estimators.iter().find(|e| e.name == name).unwrap()
}

/// Window over steps `0..=N` anchored at `prior`, with zero noise priors.
fn first_window(truth: &Trajectory, prior: Vector) -> Window {
    let nv = truth.noises[0].len();
    Window {
        outputs: truth.outputs[..=N].to_vec(),
        controls: truth.controls[..N].to_vec(),
        noise_priors: vec![Vector::zeros(nv); N + 1],
        prior,
    }
}

fn spec<'a>(e: &NamedEstimator, cost: CostForm<'a>) -> ShootingSpec<'a> {
    ShootingSpec {
        cost,
        penalty_weight: e.config.penalty_weight,
        w_box: e.config.w_box.clone(),
        fd_step: e.config.solver.fd_step,
    }
}

#[test]
fn decision_dimensions_on_the_crop() {
    let (cfg, truth) = crop(NoiseRegime::Noiseless);
    let red = cfg.reduced.as_ref().unwrap();
    let x0 = cfg.derive_prior(&truth.outputs[0]);
    let w = first_window(&truth, x0.clone());
    let dims: Vec<usize> = ["full-order", "two-stage", "baseline"]
        .iter()
        .map(|name| {
            let e = estimator(&cfg, name);
            let cost = match &e.config.weights {
                Weights::Lyapunov(c) => CostForm::FullOrder(c),
                Weights::ExpIoss(c) => CostForm::TwoStage(red, c),
                Weights::Baseline(b) => CostForm::Baseline(*b),
            };
            let mut win = w.clone();
            if e.config.scheme == Scheme::TwoStage {
                win.prior = red.transform().sharp(&x0);
            }
            let dim = build_shooting_objective(&cfg.model, &win, &spec(e, cost)).unwrap().dim();
            dim
        })
        .collect();
    // x̂_s plus N+1 noise blocks and N inputs; ẑ♯_s plus N noise blocks;
    // x̂_s plus N (noise, input) blocks
    assert_eq!(dims, vec![3 + 2 * (N + 1) + N, 2 + 2 * N, 3 + 3 * N]);
    assert_eq!(dims[1], 62);
    assert!(dims[1] < dims[0]);
}

#[test]
fn solutions_are_no_worse_than_the_true_trajectory() {
    let (cfg, truth) = crop(NoiseRegime::Noisy);
    let red = cfg.reduced.as_ref().unwrap();
    let t = red.transform();
    let x0 = cfg.derive_prior(&truth.outputs[0]);

    let e = estimator(&cfg, "full-order");
    let Weights::Lyapunov(cert) = &e.config.weights else { panic!() };
    let win = first_window(&truth, x0.clone());
    let obj = build_shooting_objective(&cfg.model, &win, &spec(e, CostForm::FullOrder(cert))).unwrap();
    let start = obj.pack(&x0, &win.noise_priors, &vec![e.config.w_box.as_ref().unwrap().center(); N]);
    let sol = solve_box_nlp(&obj.problem(), &start, &e.config.solver).unwrap();
    let at_truth = obj.cost(&obj.pack(&truth.states[0], &truth.noises[..=N], &truth.unknown_inputs[..N]));
    assert!(sol.cost <= at_truth * (1.0 + 1e-9), "full-order {} > truth {}", sol.cost, at_truth);

    let e = estimator(&cfg, "two-stage");
    let Weights::ExpIoss(cert) = &e.config.weights else { panic!() };
    let win = first_window(&truth, t.sharp(&x0));
    let obj = build_shooting_objective(&cfg.model, &win, &spec(e, CostForm::TwoStage(red, cert))).unwrap();
    let start = obj.pack(&t.sharp(&x0), &win.noise_priors[..N], &[]);
    let sol = solve_box_nlp(&obj.problem(), &start, &e.config.solver).unwrap();
    let at_truth = obj.cost(&obj.pack(&t.sharp(&truth.states[0]), &truth.noises[..N], &[]));
    assert!(sol.cost <= at_truth * (1.0 + 1e-9), "two-stage {} > truth {}", sol.cost, at_truth);
}

#[test]
fn current_output_only_enters_the_recovery() {
    let (cfg, truth) = crop(NoiseRegime::Noisy);
    let e = estimator(&cfg, "two-stage");
    let mut config = e.config.clone();
    config.x0_prior = cfg.derive_prior(&truth.outputs[0]);
    let last = 40;
    let run = |bump: f64| {
        let mut st = EstimatorState::new(&cfg.model, config.clone(), cfg.reduced.clone()).unwrap();
        let mut out = None;
        for k in 0..=last {
            let mut y = truth.outputs[k].clone();
            if k == last {
                y[1] += bump;
            }
            out = Some(st.step(&y, k.checked_sub(1).map(|j| &truth.controls[j])));
        }
        out.unwrap()
    };
    let (a, b) = (run(0.0), run(1e-4));
    assert_eq!(a.z_sharp, b.z_sharp);
    assert!((&a.x_hat - &b.x_hat).amax() > 1e-6);
}
