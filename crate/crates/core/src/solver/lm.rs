use super::{fd_jacobian, projected_gradient, LeastSquares, NlpProblem, Solution, SolverError, SolverOptions, SolverStatus};
use crate::linalg::Matrix;
use crate::model::Vector;

const ACCEPT: f64 = 1e-4;
const MAX_DAMPING: f64 = 1e32;
/// Initial damping relative to the largest squared singular value. Retrying a
/// rejected step only costs a residual evaluation, so start close to
/// Gauss-Newton.
const INITIAL_DAMPING: f64 = 1e-10;
/// Damping below which (relative to the largest squared singular value) a
/// step counts as undamped for the stopping tests.
const UNDAMPED: f64 = 1e-3;

/// Levenberg-Marquardt for `‖r(x)‖²` on a box.
///
/// Each iteration freezes coordinates pushed against a bound by the gradient,
/// takes one SVD of the column-scaled Jacobian on the rest and retries the
/// damped step with increasing damping until the gain ratio is acceptable.
/// Steps are projected onto the box.
pub fn minimize_lm(
    p: &NlpProblem,
    ls: &LeastSquares,
    x0: &Vector,
    opts: &SolverOptions,
) -> Result<Solution, SolverError> {
    let n = p.dim;
    let scale = p.scale();
    let jac = |x: &Vector| -> (Vector, Matrix) {
        match &ls.jacobian {
            Some(j) => j(x),
            None => {
                let steps = Vector::from_iterator(n, (0..n).map(|i| opts.fd_step * scale[i].max(x[i].abs())));
                fd_jacobian(|v| (ls.residual)(v), x, &steps)
            }
        }
    };

    let mut x = x0.clone();
    let (mut r, mut j) = jac(&x);
    if !r.iter().all(|v| v.is_finite()) {
        return Err(SolverError::NonFiniteStart);
    }
    let mut f = r.norm_squared();
    let mut diag = column_norms(&j, &scale);
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut status = SolverStatus::MaxIterations;
    let mut iterations = 0;
    let mut g = 2.0 * j.tr_mul(&r);
    let mut pg_norm = projected_gradient(p, &x, &g).amax();

    'outer: while iterations < opts.max_iterations {
        if pg_norm <= opts.tol || f <= opts.cost_floor {
            status = SolverStatus::Converged;
            break;
        }
        iterations += 1;
        let mut free: Vec<usize> = (0..n)
            .filter(|&i| !((x[i] <= p.lower[i] && g[i] > 0.0) || (x[i] >= p.upper[i] && g[i] < 0.0)))
            .collect();
        // also freeze bound coordinates the Gauss-Newton step would push out
        let mut rounds = 0;
        let (svd, utr, sig_max2) = loop {
            if free.is_empty() {
                status = SolverStatus::Converged;
                break 'outer;
            }
            let mut jf = Matrix::zeros(j.nrows(), free.len());
            for (c, &i) in free.iter().enumerate() {
                jf.set_column(c, &(j.column(i) / diag[i]));
            }
            let (svd, utr) = reduced_svd(jf, &r);
            let sig = &svd.singular_values;
            let sig_max2 = sig.iter().fold(0.0f64, |a, s| a.max(s * s)).max(f64::MIN_POSITIVE);
            if lambda < 0.0 {
                lambda = INITIAL_DAMPING * sig_max2;
            }
            rounds += 1;
            if rounds > 4 {
                break (svd, utr, sig_max2);
            }
            let dhat = damped_step(&svd, &utr, lambda);
            let before = free.len();
            let mut c = 0;
            free.retain(|&i| {
                let out = (x[i] <= p.lower[i] && dhat[c] < 0.0) || (x[i] >= p.upper[i] && dhat[c] > 0.0);
                c += 1;
                !out
            });
            if free.len() == before {
                break (svd, utr, sig_max2);
            }
        };
        lambda = lambda.max(f64::EPSILON * INITIAL_DAMPING * sig_max2);

        loop {
            let dhat = damped_step(&svd, &utr, lambda);
            let mut step = Vector::zeros(n);
            for (c, &i) in free.iter().enumerate() {
                step[i] = dhat[c] / diag[i];
            }
            let xs = &x + &step;
            let xt = p.project(&xs);
            let dx = &xt - &x;
            let pred = f - (&r + &j * &dx).norm_squared();
            let undamped = lambda <= UNDAMPED * sig_max2;
            // a step cut by the box proves nothing about the model minimum
            let clipped = xt != xs;
            if pred <= opts.ftol * f && (dx.amax() == 0.0 || (undamped && !clipped)) {
                // no model decrease left
                status = SolverStatus::Converged;
                break 'outer;
            }
            let rt = (ls.residual)(&xt);
            let ft = rt.norm_squared();
            let rho = if pred > 0.0 { (f - ft) / pred } else { -1.0 };
            if ft.is_finite() && rho > ACCEPT {
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                let rel_drop = (f - ft) / f;
                let small_step = (0..n).all(|i| dx[i].abs() <= opts.xtol * (x[i].abs() + scale[i]));
                x = xt;
                let (rn, jn) = jac(&x);
                r = rn;
                j = jn;
                f = r.norm_squared();
                let cn = column_norms(&j, &scale);
                for i in 0..n {
                    diag[i] = diag[i].max(cn[i]);
                }
                g = 2.0 * j.tr_mul(&r);
                pg_norm = projected_gradient(p, &x, &g).amax();
                if undamped && (rel_drop <= opts.ftol || small_step) {
                    status = SolverStatus::Converged;
                    break 'outer;
                }
                continue 'outer;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > MAX_DAMPING || !lambda.is_finite() {
                status = SolverStatus::LineSearchFailure;
                break 'outer;
            }
        }
    }
    if pg_norm <= opts.tol || f <= opts.cost_floor {
        status = SolverStatus::Converged;
    }
    Ok(Solution {
        cost: f,
        argmin: x,
        projected_gradient_norm: pg_norm,
        iterations,
        status,
    })
}

type Svd = nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>;

/// `-V diag(σ / (σ² + λ)) Uᵀr`.
fn damped_step(svd: &Svd, utr: &Vector, lambda: f64) -> Vector {
    let sig = &svd.singular_values;
    let coef = Vector::from_iterator(sig.len(), (0..sig.len()).map(|i| -sig[i] * utr[i] / (sig[i] * sig[i] + lambda)));
    svd.v_t.as_ref().expect("requested Vt").tr_mul(&coef)
}

/// SVD of `J` through a QR factorization when `J` is tall, with `Uᵀr`.
fn reduced_svd(j: Matrix, r: &Vector) -> (Svd, Vector) {
    let (m, n) = j.shape();
    if m <= n {
        let svd = j.svd(true, true);
        let utr = svd.u.as_ref().expect("requested U").tr_mul(r);
        return (svd, utr);
    }
    let qr = j.qr();
    let mut qtr = r.clone();
    qr.q_tr_mul(&mut qtr);
    let svd = qr.r().svd(true, true);
    let utr = svd.u.as_ref().expect("requested U").tr_mul(&qtr.rows(0, n));
    (svd, utr)
}

fn column_norms(j: &Matrix, scale: &Vector) -> Vector {
    Vector::from_iterator(
        j.ncols(),
        (0..j.ncols()).map(|i| {
            let c = j.column(i).norm();
            if c > 0.0 && c.is_finite() {
                c
            } else {
                1.0 / scale[i]
            }
        }),
    )
}
