//! Quasi-Newton minimization with central finite-difference gradients.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iters: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BfgsSettings {
    pub max_iters: usize,
    pub gtol: f64,
    pub ftol: f64,
    pub fd_step: f64,
}

/// Objective values at or above this (or non-finite) mark infeasible points.
pub(crate) const INVALID: f64 = 1e29;

pub(crate) fn is_valid(v: f64) -> bool {
    v.is_finite() && v < INVALID
}

/// Central differences, one coordinate per task. Each evaluation is independent,
/// so the result does not depend on scheduling. Next to an infeasible
/// neighbour the one-sided difference on the feasible side is used.
pub(crate) fn fd_gradient<F>(f: &F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let f0 = f(x);
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            match (is_valid(fp), is_valid(fm)) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - f0) / h,
                (false, true) => (f0 - fm) / h,
                (false, false) => 0.0,
            }
        })
        .collect()
}

/// Central-difference Hessian.
pub(crate) fn fd_hessian<F>(f: &F, x: &[f64], h: f64) -> nalgebra::DMatrix<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x.len();
    let f0 = f(x);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let at = |di: f64, dj: f64| {
                let mut y = x.to_vec();
                y[i] += di;
                y[j] += dj;
                f(&y)
            };
            if i == j {
                (at(h, 0.0) - 2.0 * f0 + at(-h, 0.0)) / (h * h)
            } else {
                (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
            }
        })
        .collect();
    let mut hess = nalgebra::DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        hess[(i, j)] = v;
        hess[(j, i)] = v;
    }
    hess
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
}

/// BFGS on the inverse Hessian with Armijo backtracking.
pub(crate) fn bfgs<F>(f: &F, x0: &[f64], s: &BfgsSettings) -> Minimum
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !is_valid(fx) {
        return Minimum {
            x,
            value: fx,
            iters: 0,
            converged: false,
            trace: vec![fx],
            grad_norm: f64::INFINITY,
        };
    }
    let mut g = fd_gradient(f, &x, s.fd_step);
    let mut trace = vec![fx];
    let identity = |scale: f64| {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = scale;
        }
        m
    };
    // First step moves at most one unit in any coordinate.
    let mut h_inv = identity(1.0 / sup_norm(&g).max(1.0));
    let mut fresh = true;
    let mut iters = 0;
    let mut converged = sup_norm(&g) <= s.gtol;

    while !converged && iters < s.max_iters {
        let mut d: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h_inv[i * n + j] * g[j]).sum::<f64>())
            .collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h_inv = identity(1.0 / sup_norm(&g).max(1.0));
            fresh = true;
            d = g.iter().map(|v| -v / sup_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let fxn = f(&xn);
            if is_valid(fxn) && fxn <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            if fresh {
                break;
            }
            h_inv = identity(1.0 / sup_norm(&g).max(1.0));
            fresh = true;
            continue;
        };
        iters += 1;
        let gn = fd_gradient(f, &xn, s.fd_step);
        let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let change = (fx - fxn).abs();
        x = xn;
        g = gn;
        let f_prev = fx;
        fx = fxn;
        trace.push(fx);

        let sy = dot(&step, &dg);
        if sy > 1e-12 * dot(&step, &step).sqrt() * dot(&dg, &dg).sqrt() {
            if fresh {
                // Rescale the initial inverse Hessian before the first update.
                let scale = sy / dot(&dg, &dg);
                h_inv = identity(scale);
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h_inv[i * n + j] * dg[j]).sum())
                .collect();
            let yhy = dot(&dg, &hy);
            for i in 0..n {
                for j in 0..n {
                    h_inv[i * n + j] += -rho * (hy[i] * step[j] + step[i] * hy[j])
                        + (rho * rho * yhy + rho) * step[i] * step[j];
                }
            }
            fresh = false;
        }

        if sup_norm(&g) <= s.gtol || change <= s.ftol * f_prev.abs().max(1.0) {
            converged = true;
        }
    }

    let grad_norm = sup_norm(&g);
    Minimum {
        x,
        value: fx,
        iters,
        converged,
        trace,
        grad_norm,
    }
}
