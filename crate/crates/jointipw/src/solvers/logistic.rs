//! Weighted logistic regression by Newton (Fisher scoring) with an optional
//! constant offset vector subtracted from the score. The offset form is what
//! the doubly robust inner solve needs: once the auxiliary score values are
//! fixed, its estimating equation is a weighted logistic score shifted by a
//! constant.

use crate::error::{Error, Result};
use crate::solvers::{expit, newton_solve, NewtonConfig, NewtonResult};
use ndarray::{Array1, Array2};

/// Fit of a weighted logistic regression; `fisher` is the (weighted) negative
/// score Jacobian at the solution, useful for naive variance estimates.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: Array1<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub separation: bool,
    pub fisher: Array2<f64>,
}

/// Solves `sum_i w_i (y_i - expit(x_i' b)) x_i - offset = 0`.
///
/// `offset` of `None` gives ordinary weighted maximum likelihood. Weights must
/// be nonnegative; the response must be in [0, 1] (fractional responses are
/// allowed so the fitter can also serve working-response regressions).
pub fn fit_weighted_logistic(
    x: &Array2<f64>,
    y: &Array1<f64>,
    weights: &Array1<f64>,
    offset: Option<&Array1<f64>>,
    init: Option<Array1<f64>>,
    cfg: &NewtonConfig,
    context: &str,
) -> Result<LogisticFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n < p {
        return Err(Error::TooFewRows { rows: n, required: p });
    }
    let zero = Array1::zeros(p);
    let off = offset.unwrap_or(&zero);
    let score = |b: &Array1<f64>| {
        let mut g = Array1::zeros(p);
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| x[(i, j)] * b[j]).sum();
            let r = weights[i] * (y[i] - expit(eta));
            for j in 0..p {
                g[j] += r * x[(i, j)];
            }
        }
        g - off
    };
    let jac = |b: &Array1<f64>| {
        let mut h = Array2::zeros((p, p));
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| x[(i, j)] * b[j]).sum();
            let pq = expit(eta);
            let wv = -weights[i] * pq * (1.0 - pq);
            for j in 0..p {
                let xj = wv * x[(i, j)];
                for k in 0..p {
                    h[(j, k)] += xj * x[(i, k)];
                }
            }
        }
        h
    };
    let start = init.unwrap_or_else(|| Array1::zeros(p));
    let res: NewtonResult = newton_solve(start, score, jac, cfg, context)?;
    let fisher = -jac(&res.params);
    Ok(LogisticFit {
        coef: res.params,
        iterations: res.iterations,
        residual: res.residual,
        converged: res.converged,
        separation: res.separation,
        fisher,
    })
}

/// Convenience wrapper: unweighted logistic maximum likelihood.
pub fn fit_logistic(
    x: &Array2<f64>,
    y: &Array1<f64>,
    cfg: &NewtonConfig,
    context: &str,
) -> Result<LogisticFit> {
    let w = Array1::ones(x.nrows());
    fit_weighted_logistic(x, y, &w, None, None, cfg, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: minimize the negative log-likelihood over a
    /// progressively refined grid, no derivatives involved.
    fn grid_search_logistic(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
        let p = x.ncols();
        let mut center = vec![0.0; p];
        let mut width = 4.0;
        let nll = |b: &[f64]| -> f64 {
            let mut total = 0.0;
            for i in 0..x.nrows() {
                let eta: f64 = (0..p).map(|j| x[(i, j)] * b[j]).sum();
                // log(1 + e^eta) - y*eta, computed stably
                let log1pe = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                total += log1pe - y[i] * eta;
            }
            total
        };
        for _refine in 0..40 {
            let mut best = center.clone();
            let mut best_val = nll(&center);
            // coordinate grid: 9 points per coordinate around the center
            for j in 0..p {
                for step in -4i32..=4 {
                    let mut cand = best.clone();
                    cand[j] = center[j] + width * step as f64 / 4.0;
                    let v = nll(&cand);
                    if v < best_val {
                        best_val = v;
                        best = cand;
                    }
                }
            }
            center = best;
            width *= 0.6;
        }
        Array1::from(center)
    }

    fn simulate_fixture(seed: u64, n: usize, truth: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = truth.len();
        let mut x = Array2::zeros((n, p));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for j in 1..p {
                x[(i, j)] = rng.gen::<f64>() * 2.0 - 1.0;
            }
            let eta: f64 = (0..p).map(|j| x[(i, j)] * truth[j]).sum();
            y[i] = if rng.gen::<f64>() < expit(eta) { 1.0 } else { 0.0 };
        }
        (x, y)
    }

    #[test]
    fn matches_grid_search_oracle_on_fixtures() {
        let truths: [&[f64]; 5] = [
            &[-0.5, 1.0],
            &[0.3, -0.8, 0.5],
            &[-1.0, 0.4, 0.9],
            &[0.0, 1.5, -1.2, 0.3],
            &[0.7, -0.2],
        ];
        for (k, truth) in truths.iter().enumerate() {
            let (x, y) = simulate_fixture(100 + k as u64, 600, truth);
            let fit = fit_logistic(&x, &y, &NewtonConfig::default(), "fixture").unwrap();
            let oracle = grid_search_logistic(&x, &y);
            for j in 0..truth.len() {
                assert_abs_diff_eq!(fit.coef[j], oracle[j], epsilon = 1e-4);
            }
            assert!(fit.converged);
        }
    }

    #[test]
    fn weights_scale_invariance() {
        // Multiplying every weight by a constant must not change the fit.
        let (x, y) = simulate_fixture(7, 400, &[0.2, -0.6, 0.9]);
        let w1 = Array1::ones(400);
        let w2 = Array1::from_elem(400, 13.5);
        let f1 = fit_weighted_logistic(&x, &y, &w1, None, None, &NewtonConfig::default(), "w1").unwrap();
        let f2 = fit_weighted_logistic(&x, &y, &w2, None, None, &NewtonConfig::default(), "w2").unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(f1.coef[j], f2.coef[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn offset_shifts_the_score() {
        // With offset equal to the score at some beta0, the solution is beta0.
        let (x, y) = simulate_fixture(11, 500, &[0.1, 0.5]);
        let beta0 = array![0.4, -0.3];
        let mut off = Array1::zeros(2);
        for i in 0..500 {
            let eta = x[(i, 0)] * beta0[0] + x[(i, 1)] * beta0[1];
            let r = y[i] - expit(eta);
            off[0] += r * x[(i, 0)];
            off[1] += r * x[(i, 1)];
        }
        let fit = fit_weighted_logistic(
            &x,
            &y,
            &Array1::ones(500),
            Some(&off),
            None,
            &NewtonConfig::default(),
            "offset",
        )
        .unwrap();
        assert_abs_diff_eq!(fit.coef[0], beta0[0], epsilon = 1e-7);
        assert_abs_diff_eq!(fit.coef[1], beta0[1], epsilon = 1e-7);
    }

    #[test]
    fn separation_is_flagged() {
        // Perfectly separated data: the iterate norm grows without bound, so
        // with a low separation threshold the flag must be raised (or the
        // budget exhausted first).
        let x = array![[1.0, -2.0], [1.0, -1.0], [1.0, 1.0], [1.0, 2.0]];
        let y = array![0.0, 0.0, 1.0, 1.0];
        let cfg = NewtonConfig { max_iter: 400, separation_norm: 5.0, ..NewtonConfig::default() };
        match fit_logistic(&x, &y, &cfg, "separated") {
            Ok(fit) => assert!(fit.separation),
            Err(e) => assert!(matches!(e, crate::error::Error::NoConvergence { .. })),
        }
    }
}
