//! Mean regression for responses in the open unit interval under the simplex
//! distribution with a logit mean link and constant dispersion.
//!
//! With constant dispersion the dispersion parameter factors out of the mean
//! score, so the mean coefficients are obtained by minimizing the total
//! simplex deviance
//!     d(y, mu) = (y - mu)^2 / { y (1 - y) mu^2 (1 - mu)^2 }.
//! The minimizer is found by Newton on the deviance gradient with a
//! finite-difference Jacobian (the coefficient vector is tiny).

use crate::error::{Error, Result};
use crate::solvers::{expit, newton_solve, NewtonConfig};
use ndarray::{Array1, Array2};

#[derive(Debug, Clone)]
pub struct SimplexFit {
    pub coef: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub deviance: f64,
}

impl SimplexFit {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let eta: f64 = x.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum();
        expit(eta)
    }
}

fn deviance_gradient(x: &Array2<f64>, y: &Array1<f64>, beta: &Array1<f64>) -> Array1<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let mut g = Array1::zeros(p);
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
        let mu = expit(eta);
        let r = y[i] - mu;
        let gmu = 1.0 / (mu * mu * (1.0 - mu) * (1.0 - mu));
        // d/dmu of r^2 * gmu, divided by y(1-y)
        let ddmu = (-2.0 * r * gmu + r * r * gmu * (2.0 / (1.0 - mu) - 2.0 / mu))
            / (y[i] * (1.0 - y[i]));
        let chain = ddmu * mu * (1.0 - mu);
        for j in 0..p {
            g[j] += chain * x[(i, j)];
        }
    }
    g
}

fn total_deviance(x: &Array2<f64>, y: &Array1<f64>, beta: &Array1<f64>) -> f64 {
    let n = x.nrows();
    let p = x.ncols();
    let mut d = 0.0;
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
        let mu = expit(eta);
        let r = y[i] - mu;
        d += r * r / (y[i] * (1.0 - y[i]) * mu * mu * (1.0 - mu) * (1.0 - mu));
    }
    d
}

/// Fits the constant-dispersion simplex mean regression of `y` on `x`.
/// Responses must lie strictly in (0, 1).
pub fn fit_simplex(
    x: &Array2<f64>,
    y: &Array1<f64>,
    cfg: &NewtonConfig,
    context: &str,
) -> Result<SimplexFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n < p {
        return Err(Error::TooFewRows { rows: n, required: p });
    }
    for i in 0..n {
        if !(y[i] > 0.0 && y[i] < 1.0) {
            return Err(Error::ResponseOutOfRange { row: i, value: y[i] });
        }
    }
    // Warm start: least squares of logit(y) on x.
    let mut xtx = Array2::zeros((p, p));
    let mut xty = Array1::zeros(p);
    for i in 0..n {
        let ly = (y[i] / (1.0 - y[i])).ln();
        for j in 0..p {
            xty[j] += x[(i, j)] * ly;
            for k in 0..p {
                xtx[(j, k)] += x[(i, j)] * x[(i, k)];
            }
        }
    }
    let start = crate::linalg::solve_checked(&xtx, &xty, cfg.cond_limit)
        .ok_or_else(|| Error::RankDeficient { context: context.to_string() })?;

    let score = |b: &Array1<f64>| deviance_gradient(x, y, b);
    let jac = |b: &Array1<f64>| {
        let mut j = Array2::zeros((p, p));
        let g0 = deviance_gradient(x, y, b);
        for col in 0..p {
            let h = 1e-6 * (1.0 + b[col].abs());
            let mut bp = b.clone();
            bp[col] += h;
            let gp = deviance_gradient(x, y, &bp);
            for row in 0..p {
                j[(row, col)] = (gp[row] - g0[row]) / h;
            }
        }
        j
    };
    // The deviance gradient scales with n; use an n-relative score tolerance so
    // the stopping rule is invariant to sample size.
    let mut scaled = cfg.clone();
    scaled.score_tol = cfg.score_tol * (n as f64).max(1.0);
    let res = newton_solve(start, score, jac, &scaled, context)?;
    let deviance = total_deviance(x, y, &res.params);
    Ok(SimplexFit {
        coef: res.params,
        iterations: res.iterations,
        converged: res.converged,
        deviance,
    })
}
