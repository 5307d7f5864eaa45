use std::collections::VecDeque;

use super::{fd_gradient_steps, projected_gradient, NlpProblem, Solution, SolverError, SolverOptions, SolverStatus};
use crate::model::Vector;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Projected L-BFGS with backtracking on the projection arc.
///
/// The quasi-Newton direction is computed in scaled variables on the free
/// coordinates; coordinates held at a bound by the gradient are frozen.
pub fn minimize_lbfgs(p: &NlpProblem, x0: &Vector, opts: &SolverOptions) -> Result<Solution, SolverError> {
    let n = p.dim;
    let scale = p.scale();
    let steps = Vector::from_iterator(n, (0..n).map(|i| opts.fd_step * scale[i].max(x0[i].abs())));
    let grad = |x: &Vector| -> Result<Vector, SolverError> {
        let steps = Vector::from_iterator(n, (0..n).map(|i| steps[i].max(opts.fd_step * x[i].abs())));
        fd_gradient_steps(p, x, &steps)
    };

    let mut x = x0.clone();
    let mut f = p.eval(&x);
    let mut g = grad(&x)?;
    // history in scaled variables ξ = x / scale
    let mut mem: VecDeque<(Vector, Vector, f64)> = VecDeque::new();
    let mut status = SolverStatus::MaxIterations;
    let mut iterations = 0;
    let mut pg_norm = projected_gradient(p, &x, &g).amax();

    while iterations < opts.max_iterations {
        if pg_norm <= opts.tol {
            status = SolverStatus::Converged;
            break;
        }
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = x[i] <= p.lower[i] && g[i] > 0.0;
                let at_hi = x[i] >= p.upper[i] && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let mask = |v: &Vector| Vector::from_iterator(n, (0..n).map(|i| if free[i] { v[i] } else { 0.0 }));
        let gs = mask(&g.component_mul(&scale));

        let mut dir = two_loop(&gs, &mem, &mask);
        let mut d = dir.component_mul(&scale);
        if g.dot(&d) >= 0.0 || !d.iter().all(|v| v.is_finite()) {
            mem.clear();
            dir = -gs.clone();
            d = dir.component_mul(&scale);
        }
        let alpha0 = if mem.is_empty() { 1.0 / gs.amax().max(1.0) } else { 1.0 };

        let mut accepted = None;
        let mut alpha = alpha0;
        for _ in 0..MAX_BACKTRACKS {
            let xt = p.project(&(&x + &d * alpha));
            let ft = p.eval(&xt);
            if ft.is_finite() && ft <= f + ARMIJO * g.dot(&(&xt - &x)) {
                accepted = Some((xt, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xt, ft)) = accepted else {
            if !mem.is_empty() {
                mem.clear();
                continue;
            }
            status = SolverStatus::LineSearchFailure;
            break;
        };
        let gt = grad(&xt)?;
        let s = (&xt - &x).component_div(&scale);
        let y = (&gt - &g).component_mul(&scale);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            mem.push_back((s.clone(), y, 1.0 / sy));
            if mem.len() > opts.memory {
                mem.pop_front();
            }
        }
        let step = (&xt - &x).amax();
        let decrease = f - ft;
        x = xt;
        f = ft;
        g = gt;
        pg_norm = projected_gradient(p, &x, &g).amax();
        if step <= opts.xtol * (x.amax() + opts.xtol) && decrease <= opts.ftol * f.abs().max(f64::MIN_POSITIVE) {
            status = if pg_norm <= opts.tol.max(1e3 * opts.ftol * f.abs()) {
                SolverStatus::Converged
            } else {
                SolverStatus::LineSearchFailure
            };
            break;
        }
    }
    if pg_norm <= opts.tol {
        status = SolverStatus::Converged;
    }
    Ok(Solution {
        cost: p.eval(&x),
        argmin: x,
        projected_gradient_norm: pg_norm,
        iterations,
        status,
    })
}

fn two_loop(g: &Vector, mem: &VecDeque<(Vector, Vector, f64)>, mask: &impl Fn(&Vector) -> Vector) -> Vector {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let s = mask(s);
        let y = mask(y);
        let a = rho * s.dot(&q);
        q -= &y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let (s, y) = (mask(s), mask(y));
        let yy = y.dot(&y);
        if yy > 0.0 {
            q *= s.dot(&y).max(0.0) / yy;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let s = mask(s);
        let y = mask(y);
        let b = rho * y.dot(&q);
        q += &s * (a - b);
    }
    -q
}
