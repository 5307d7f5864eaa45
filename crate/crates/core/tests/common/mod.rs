//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uise::crop::{crop_input_direction, crop_model, crop_transform, unknown_input_truth, CropParams};
use uise::detectability::{check_linear_strong_detectability, Counterexample, LyapunovCertificate};
use uise::model::{simulate_with, SystemModel, Vector};
use uise::noise::sample_uniform_noise;
use uise::solver::{solve_box_nlp, NlpProblem, SolverOptions};
use uise::transform::{reduce_model, sample_box, WCheckSpec};

pub type M = DMatrix<f64>;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

// ---------------------------------------------------------------------------
// Linear strong detectability, by simulation

/// Brute-force verdict: look for an input difference in `ker(CB) \ ker(B)`
/// (outputs agree at 0 and 1 while the states split); otherwise simulate
/// output-matched error trajectories for 200 steps and require contraction
/// below 1e-6 from several random initial errors.
pub fn linear_oracle(a: &M, b: &M, c: &M, rng: &mut ChaCha8Rng) -> bool {
    let n = a.nrows();
    let q = b.ncols();
    let cb = c * b;
    // null space of CB from the eigenvectors of (CB)ᵀCB
    let gram = cb.transpose() * &cb;
    let eig = gram.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..q {
        if eig.eigenvalues[i].abs() <= 1e-10 * scale || scale < 1e-14 {
            let w0 = eig.eigenvectors.column(i).into_owned();
            if (b * &w0).norm() > 1e-8 {
                return false;
            }
        }
    }
    // least-squares input difference matching the next output
    let step = |dx: &Vector| -> Vector {
        let ax = a * dx;
        if q == 0 || cb.norm() == 0.0 {
            return ax;
        }
        let rhs = -(c * &ax);
        let dw = cb.clone().svd(true, true).solve(&rhs, 1e-12).expect("svd solve");
        ax + b * dw
    };
    for _ in 0..5 {
        let dx0 = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut dx = dx0.clone();
        for _ in 0..200 {
            dx = step(&dx);
        }
        if dx.norm() > 1e-6 * dx0.norm() {
            return false;
        }
    }
    true
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> M {
    M::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random `(A, B, C)` with `n ≤ 4`, `q ≤ 2`, `p ≤ 3`. The decoupled error map
/// is rescaled (using the oracle's own growth estimate) so its spectral radius
/// lands in `[0.2, 0.85]` or `[1.1, 1.6]`, away from the 200-step
/// contraction threshold. Some systems get `CB = 0` exactly (B confined to the
/// first axis, C blind to it) to exercise the rank failure.
pub fn random_linear_system(rng: &mut ChaCha8Rng) -> (M, M, M) {
    let n = rng.random_range(1..=4);
    let q = rng.random_range(1..=2);
    let p = rng.random_range(1..=3);
    let mut a = rand_matrix(rng, n, n);
    let mut b = rand_matrix(rng, n, q);
    let mut c = rand_matrix(rng, p, n);
    if n >= 2 && rng.random_bool(0.2) {
        for i in 1..n {
            b.row_mut(i).fill(0.0);
        }
        c.column_mut(0).fill(0.0);
    }
    let target = if rng.random_bool(0.5) {
        rng.random_range(0.2..0.85)
    } else {
        rng.random_range(1.1..1.6)
    };
    let rate = oracle_growth_rate(&a, &b, &c, rng);
    if rate > 1e-8 {
        a *= target / rate;
    }
    (a, b, c)
}

/// Asymptotic per-step growth of output-matched errors, by power iteration.
fn oracle_growth_rate(a: &M, b: &M, c: &M, rng: &mut ChaCha8Rng) -> f64 {
    let n = a.nrows();
    let cb = c * b;
    let mut dx = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut log_growth = 0.0;
    for it in 0..400 {
        let ax = a * &dx;
        let next = if cb.norm() == 0.0 {
            ax
        } else {
            let dw = cb.clone().svd(true, true).solve(&(-(c * &ax)), 1e-12).expect("svd solve");
            ax + b * dw
        };
        let nn = next.norm();
        if nn < 1e-200 {
            return 0.0;
        }
        if it >= 300 {
            log_growth += (nn / dx.norm()).ln();
        }
        dx = next / nn;
    }
    // geometric mean, so rotating complex pairs average out
    (log_growth / 100.0).exp()
}

/// Hand-built systems: zero input direction (stable and unstable), rank
/// failures, the necessity construction and marginal cases.
pub fn linear_edge_cases() -> Vec<(&'static str, M, M, M)> {
    let m = |r: usize, c: usize, v: &[f64]| M::from_row_slice(r, c, v);
    vec![
        ("B = 0, stable A", m(2, 2, &[0.5, 0.1, 0.0, 0.3]), M::zeros(2, 1), m(1, 2, &[1.0, 0.0])),
        ("B = 0, unstable A", m(2, 2, &[1.2, 0.0, 0.0, 0.5]), M::zeros(2, 1), m(1, 2, &[0.0, 1.0])),
        ("CB = 0", m(2, 2, &[0.5, 0.0, 0.0, 0.5]), m(2, 1, &[0.0, 1.0]), m(1, 2, &[1.0, 0.0])),
        (
            "rank CB = 1 < rank B = 2",
            m(3, 3, &[0.4, 0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.4]),
            m(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            m(1, 3, &[1.0, 1.0, 0.0]),
        ),
        (
            "necessity: ker CB holds a B-visible input",
            m(2, 2, &[0.2, 0.0, 0.0, 0.2]),
            m(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            m(1, 2, &[1.0, 1.0]),
        ),
        ("scalar A = 0.5, B = C = 1", m(1, 1, &[0.5]), m(1, 1, &[1.0]), m(1, 1, &[1.0])),
        (
            "repeated input columns",
            m(2, 2, &[0.5, 0.2, 0.0, 0.7]),
            m(2, 2, &[1.0, 1.0, 0.0, 0.0]),
            m(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        ),
        (
            "rotation in the decoupled subspace",
            m(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5]),
            m(3, 1, &[0.0, 0.0, 1.0]),
            m(1, 3, &[0.0, 0.0, 1.0]),
        ),
        (
            "unstable hidden mode",
            m(2, 2, &[1.5, 0.0, 0.0, 0.1]),
            m(2, 1, &[0.0, 1.0]),
            m(1, 2, &[0.0, 1.0]),
        ),
        (
            "nilpotent dynamics",
            m(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
            m(3, 1, &[1.0, 0.0, 0.0]),
            m(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        ),
    ]
}

pub struct OracleComparison {
    pub cases: usize,
    pub detectable: usize,
    pub disagreements: Vec<String>,
}

/// Checker verdicts against [`linear_oracle`] on the edge cases plus
/// `random_cases` random systems.
pub fn linear_checker_disagreements(seed: u64, random_cases: usize) -> OracleComparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, M, M, M)> =
        linear_edge_cases().into_iter().map(|(n, a, b, c)| (n.to_string(), a, b, c)).collect();
    for i in 0..random_cases {
        let (a, b, c) = random_linear_system(&mut rng);
        cases.push((format!("random #{i}"), a, b, c));
    }
    let mut bad = vec![];
    let mut detectable = 0;
    for (name, a, b, c) in &cases {
        let report = check_linear_strong_detectability(a, b, c, None).expect("well-formed");
        let oracle = linear_oracle(a, b, c, &mut rng);
        detectable += usize::from(oracle);
        if report.strongly_detectable != oracle {
            bad.push(format!(
                "{name}: checker {} (rho {:?}), oracle {oracle}",
                report.strongly_detectable, report.spectral_radius
            ));
        }
    }
    OracleComparison {
        cases: cases.len(),
        detectable,
        disagreements: bad,
    }
}

// ---------------------------------------------------------------------------
// Solver versus exhaustive grid search

pub const GRID_STEP: f64 = 1e-4;

pub struct ToyProblem {
    pub name: &'static str,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub start: Vec<f64>,
    pub cost: fn(&[f64]) -> f64,
    /// Sum-of-squares form, when available.
    pub residual: Option<fn(&[f64]) -> Vec<f64>>,
}

fn sq(r: Vec<f64>) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Horizon-2 MHE for `x⁺ = 0.9 x + w`, `y = x + v` over `(x̂₀, ŵ₀, ŵ₁)`.
fn mhe_residual(d: &[f64]) -> Vec<f64> {
    const Y: [f64; 3] = [1.0, 0.95, 0.83];
    const PRIOR: f64 = 1.02;
    const MU: f64 = 0.5;
    let (x0, w0, w1) = (d[0], d[1], d[2]);
    let x1 = 0.9 * x0 + w0;
    let x2 = 0.9 * x1 + w1;
    vec![
        2.0 * MU * (x0 - PRIOR),
        MU.sqrt() * w0,
        w1,
        10.0 * MU * (Y[0] - x0),
        (MU * 100.0f64).sqrt() * (Y[1] - x1),
        10.0 * (Y[2] - x2),
    ]
}

fn rosenbrock_residual(d: &[f64]) -> Vec<f64> {
    vec![1.0 - d[0], 10.0 * (d[1] - d[0] * d[0])]
}

fn bounded_quadratic_residual(d: &[f64]) -> Vec<f64> {
    vec![d[0] - 1.5, 3.0 * (d[1] - 0.3 * d[0])]
}

fn exp_fit_residual(d: &[f64]) -> Vec<f64> {
    const T: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
    const Y: [f64; 5] = [0.71, 0.57, 0.46, 0.39, 0.31];
    T.iter().zip(Y).map(|(t, y)| d[0] * (d[1] * t).exp() - y).collect()
}

pub fn toy_problems() -> Vec<ToyProblem> {
    vec![
        ToyProblem {
            name: "scalar horizon-2 MHE",
            lower: vec![0.99, 0.03, -0.03],
            upper: vec![1.01, 0.05, -0.01],
            start: vec![1.0, 0.04, -0.02],
            cost: |d| sq(mhe_residual(d)),
            residual: Some(mhe_residual),
        },
        ToyProblem {
            name: "tilted double well",
            lower: vec![-1.0],
            upper: vec![1.0],
            start: vec![-0.2],
            cost: |d| (d[0] * d[0] - 0.5).powi(2) + 0.1 * d[0],
            residual: None,
        },
        ToyProblem {
            name: "Rosenbrock valley",
            lower: vec![0.5, 0.5],
            upper: vec![1.5, 1.5],
            start: vec![0.6, 1.4],
            cost: |d| sq(rosenbrock_residual(d)),
            residual: Some(rosenbrock_residual),
        },
        ToyProblem {
            name: "quadratic with active bound",
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            start: vec![0.2, 0.9],
            cost: |d| sq(bounded_quadratic_residual(d)),
            residual: Some(bounded_quadratic_residual),
        },
        ToyProblem {
            name: "exponential decay fit",
            lower: vec![0.5, -0.7],
            upper: vec![1.0, -0.2],
            start: vec![0.55, -0.65],
            cost: |d| sq(exp_fit_residual(d)),
            residual: Some(exp_fit_residual),
        },
    ]
}

/// Minimizer over the grid `lower + i·GRID_STEP` (first one on ties).
pub fn grid_argmin(p: &ToyProblem) -> Vec<f64> {
    let dim = p.lower.len();
    let counts: Vec<usize> = (0..dim)
        .map(|i| ((p.upper[i] - p.lower[i]) / GRID_STEP).round() as usize + 1)
        .collect();
    let mut idx = vec![0usize; dim];
    let mut point = p.lower.clone();
    let mut best = (f64::INFINITY, point.clone());
    loop {
        for i in 0..dim {
            point[i] = (p.lower[i] + idx[i] as f64 * GRID_STEP).min(p.upper[i]);
        }
        let f = (p.cost)(&point);
        if f < best.0 {
            best = (f, point.clone());
        }
        let mut i = 0;
        loop {
            if i == dim {
                return best.1;
            }
            idx[i] += 1;
            if idx[i] < counts[i] {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

pub fn solve_toy(p: &ToyProblem) -> Vec<f64> {
    let dim = p.lower.len();
    let v = |d: &[f64]| Vector::from_vec(d.to_vec());
    let problem = match p.residual {
        Some(r) => NlpProblem::least_squares(dim, move |x: &Vector| v(&r(x.as_slice()))),
        None => {
            let c = p.cost;
            NlpProblem::new(dim, move |x: &Vector| c(x.as_slice()))
        }
    }
    .with_bounds(v(&p.lower), v(&p.upper));
    let opts = SolverOptions {
        tol: 1e-12,
        ftol: 1e-16,
        xtol: 1e-15,
        max_iterations: 2000,
        ..SolverOptions::default()
    };
    solve_box_nlp(&problem, &v(&p.start), &opts).expect("solver runs").argmin.iter().copied().collect()
}

/// `(name, max |solver − grid|)` per toy problem.
pub fn solver_grid_gaps() -> Vec<(&'static str, f64)> {
    toy_problems()
        .iter()
        .map(|p| {
            let g = grid_argmin(p);
            let s = solve_toy(p);
            let gap = g.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            (p.name, gap)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Crop transform fidelity

pub struct Fidelity {
    /// `max |T♯ B|`.
    pub decoupling: f64,
    /// `max |ψ(y, T♯x, v) − T♭x|`.
    pub psi: f64,
    /// `max |T⁻¹(T x) − x| / |x|`.
    pub roundtrip: f64,
    /// `max |z♯_k − T♯(x_k)|` along a simulated run.
    pub consistency: f64,
}

pub fn crop_fidelity(samples: usize, steps: usize, seed: u64) -> Fidelity {
    let p = CropParams::default();
    let m = crop_model(&p).unwrap();
    let t = std::sync::Arc::new(crop_transform(&p).unwrap());
    let tm = t.matrix().expect("linear transform").clone();
    let sharp_rows = tm.rows(t.n_flat(), t.n_sharp()).into_owned();
    let decoupling = (&sharp_rows * crop_input_direction(&p)).amax();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = m.domains();
    let (mut psi, mut roundtrip) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let x = sample_box(&d.x, &mut rng);
        let v = sample_box(&d.v, &mut rng);
        let y = m.h(&x, &v);
        psi = psi.max((t.psi(&y, &t.sharp(&x), &v) - t.flat(&x)).amax());
        roundtrip = roundtrip.max((t.inverse(&t.apply(&x)) - &x).amax() / x.amax());
    }

    let red = reduce_model(&m, t.clone(), &WCheckSpec::default()).unwrap();
    let noises = sample_uniform_noise(&d.v, steps + 1, seed).unwrap();
    let controls = vec![Vector::from_element(1, p.u_d); steps];
    let x0 = Vector::from_vec(vec![0.0013, 0.09, 0.09]);
    let tr = simulate_with(&m, &x0, &controls, |_, x| Vector::from_element(1, unknown_input_truth(x[2])), &noises)
        .unwrap();
    let mut z = t.sharp(&x0);
    let mut consistency = 0.0f64;
    for k in 0..steps {
        z = red.f_sharp(&z, &tr.outputs[k], &controls[k], &noises[k]);
        consistency = consistency.max((&z - t.sharp(&tr.states[k + 1])).amax());
    }
    Fidelity {
        decoupling,
        psi,
        roundtrip,
        consistency,
    }
}

// ---------------------------------------------------------------------------
// Dissipation inequality, evaluated from a counterexample's raw arguments

/// `(lhs, rhs)` recomputed from the concatenated `(x, u, w, v, v⁺)` blocks.
pub fn reevaluate_dissipation(m: &SystemModel, cert: &LyapunovCertificate, cx: &Counterexample) -> (f64, f64) {
    let (nx, nu, nw, nv) = (m.n_x(), m.n_u(), m.n_w(), m.n_v());
    let split = |a: &[f64]| {
        let mut o = 0;
        let mut take = |n: usize| {
            let v = Vector::from_column_slice(&a[o..o + n]);
            o += n;
            v
        };
        (take(nx), take(nu), take(nw), take(nv), take(nv))
    };
    let (x, u, w, v, vn) = split(&cx.first);
    let (xt, ut, wt, vt, vnt) = split(&cx.second);
    assert_eq!(u, ut, "pairs share the control");
    let quad = |d: &Vector| (d.transpose() * &cert.p * d)[(0, 0)];
    let xn = m.f(&x, &u, &w);
    let xnt = m.f(&xt, &u, &wt);
    let dy = m.h(&x, &v) - m.h(&xt, &vt);
    let dyn_ = m.h(&xn, &vn) - m.h(&xnt, &vnt);
    let lhs = quad(&(&xn - &xnt));
    let rhs = cert.mu * quad(&(&x - &xt))
        + cert.s_v * ((&v - &vt).norm_squared() + (&vn - &vnt).norm_squared())
        + cert.s_y * (dy.norm_squared() + dyn_.norm_squared());
    (lhs, rhs)
}
