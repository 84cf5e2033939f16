//! Derivative-free minimization: Nelder-Mead, BFGS on central-difference
//! gradients, and finite-difference Hessians.
//!
//! Non-finite objective values are treated as `+∞`.

use crate::error::{domain, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

struct Counted<F> {
    f: F,
    n: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.n += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Nelder-Mead with the standard coefficients (1, 2, 1/2, 1/2). Stops when
/// the spread of simplex values and the simplex diameter both fall below `tol`.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: &[f64], max_iter: usize, tol: f64) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 || step.len() != n {
        return domain("start and step must be nonempty and of equal length");
    }
    let mut f = Counted { f, n: 0 };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step[i];
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f.eval(v)).collect();
    let mut it = 0;
    let mut converged = false;
    while it < max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = vals[n] - vals[0];
        let diam = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if vals[0].is_finite() && spread.abs() <= tol && diam <= tol {
            converged = true;
            break;
        }
        it += 1;
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f.eval(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f.eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[n] {
            let xc = along(-0.5);
            let fc = f.eval(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = f.eval(&xc);
            (xc, fc)
        };
        if fc < vals[n].min(fr) {
            simplex[n] = xc;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let v: Vec<f64> = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
            vals[i] = f.eval(&v);
            simplex[i] = v;
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    Ok(OptResult {
        x: simplex[best].clone(),
        fx: vals[best],
        iterations: it,
        evaluations: f.n,
        converged,
    })
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient with steps `rel·max(|x_i|, 1)`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], rel: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i], rel);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian with steps `rel·max(|x_i|, 1)`.
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], rel: f64) -> Matrix<f64> {
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v, rel)).collect();
    fd_hessian_with_steps(f, x, &h)
}

/// Central-difference Hessian with explicit per-coordinate steps.
pub fn fd_hessian_with_steps<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: &[f64]) -> Matrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let mut out = Matrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let up = f(&xp);
        xp[i] = x[i] - h[i];
        let dn = f(&xp);
        xp[i] = x[i];
        out[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// BFGS with backtracking (Armijo) line search on central-difference
/// gradients. Stops when the gradient max-norm drops below `gtol` or a line
/// search cannot make progress.
pub fn bfgs<F>(f: F, x0: &[f64], max_iter: usize, rel_step: f64, gtol: f64) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return domain("empty start vector");
    }
    let mut f = Counted { f, n: 0 };
    let mut x = x0.to_vec();
    let mut fx = f.eval(&x);
    if !fx.is_finite() {
        return Ok(OptResult {
            x,
            fx,
            iterations: 0,
            evaluations: f.n,
            converged: false,
        });
    }
    let grad = |f: &mut Counted<F>, x: &[f64]| fd_gradient(|v| f.eval(v), x, rel_step);
    let mut g = grad(&mut f, &x);
    let mut hinv = Matrix::<f64>::identity(n);
    let mut it = 0;
    let mut converged = false;
    while it < max_iter {
        if g.iter().all(|v| v.is_finite()) && g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= gtol {
            converged = true;
            break;
        }
        it += 1;
        let mut dir: Vec<f64> = hinv.matvec(&g)?.into_iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            hinv = Matrix::identity(n);
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let fnew = f.eval(&xn);
            if fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            converged = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= gtol.sqrt();
            break;
        };
        let gn = grad(&mut f, &xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            let hy = hinv.matvec(&y)?;
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    hinv[(i, j)] += (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let small_move = (fx - fnew).abs() <= 1e-12 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if small_move {
            converged = true;
            break;
        }
    }
    Ok(OptResult {
        x,
        fx,
        iterations: it,
        evaluations: f.n,
        converged,
    })
}
