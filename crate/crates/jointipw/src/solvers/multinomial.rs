//! Multinomial (baseline-category) logistic regression fitted by Newton on
//! the stacked score. Used by the membership-ratio selection model, where the
//! three categories are "in both samples", "internal only", and "external
//! only", with "external only" as the reference.

use crate::error::{Error, Result};
use crate::linalg;
use crate::solvers::NewtonConfig;
use ndarray::{Array1, Array2};

#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// Coefficients for each non-reference category, in category order with
    /// the reference omitted; each row has length `x.ncols()`.
    pub coef: Array2<f64>,
    pub reference: usize,
    pub n_categories: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl MultinomialFit {
    /// Category probabilities for a single feature row.
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let q = x.len();
        let mut eta = vec![0.0; self.n_categories];
        let mut r = 0;
        for c in 0..self.n_categories {
            if c == self.reference {
                continue;
            }
            eta[c] = (0..q).map(|j| self.coef[(r, j)] * x[j]).sum();
            r += 1;
        }
        let max_eta = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = eta.iter().map(|e| (e - max_eta).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }
}

/// Fits a baseline-category multinomial logit.
///
/// `y` holds category codes in `0..n_categories`. Every category must be
/// observed at least once, otherwise the corresponding log-odds are
/// unidentified and [`Error::MissingCategory`] is returned.
pub fn fit_multinomial(
    x: &Array2<f64>,
    y: &[usize],
    n_categories: usize,
    reference: usize,
    cfg: &NewtonConfig,
    context: &str,
) -> Result<MultinomialFit> {
    let n = x.nrows();
    let q = x.ncols();
    assert!(reference < n_categories);
    assert_eq!(y.len(), n);
    for c in 0..n_categories {
        if !y.iter().any(|&v| v == c) {
            return Err(Error::MissingCategory { category: c });
        }
    }
    let nfree = n_categories - 1;
    let dim = nfree * q;
    if n < dim {
        return Err(Error::TooFewRows { rows: n, required: dim });
    }
    // Map free-slot index -> category code.
    let free_cats: Vec<usize> = (0..n_categories).filter(|&c| c != reference).collect();

    let probs = |beta: &Array1<f64>, i: usize| -> Vec<f64> {
        let mut eta = vec![0.0; n_categories];
        for (r, &c) in free_cats.iter().enumerate() {
            eta[c] = (0..q).map(|j| beta[r * q + j] * x[(i, j)]).sum();
        }
        let max_eta = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = eta.iter().map(|e| (e - max_eta).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    };

    let mut beta = Array1::zeros(dim);
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_norm = f64::INFINITY;
    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let mut g: Array1<f64> = Array1::zeros(dim);
        let mut h: Array2<f64> = Array2::zeros((dim, dim));
        for i in 0..n {
            let p = probs(&beta, i);
            for (r, &c) in free_cats.iter().enumerate() {
                let resid = (if y[i] == c { 1.0 } else { 0.0 }) - p[c];
                for j in 0..q {
                    g[r * q + j] += resid * x[(i, j)];
                }
                for (s, &d) in free_cats.iter().enumerate() {
                    let wcd = -p[c] * ((if c == d { 1.0 } else { 0.0 }) - p[d]);
                    for j in 0..q {
                        let base = wcd * x[(i, j)];
                        for k in 0..q {
                            h[(r * q + j, s * q + k)] += base * x[(i, k)];
                        }
                    }
                }
            }
        }
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < cfg.score_tol {
            converged = true;
            break;
        }
        let step = linalg::solve_checked(&h, &g, cfg.cond_limit)
            .ok_or_else(|| Error::SingularJacobian { context: context.to_string() })?;
        // h is the score Jacobian (negative definite), so the Newton update is
        // beta - h^{-1} g; damp if the score norm fails to shrink.
        let mut lambda = 1.0;
        for _ in 0..=cfg.max_halvings {
            let cand = &beta - &(lambda * &step);
            // one cheap norm check via the score at the candidate
            let mut cg: Array1<f64> = Array1::zeros(dim);
            for i in 0..n {
                let p = probs(&cand, i);
                for (r, &c) in free_cats.iter().enumerate() {
                    let resid = (if y[i] == c { 1.0 } else { 0.0 }) - p[c];
                    for j in 0..q {
                        cg[r * q + j] += resid * x[(i, j)];
                    }
                }
            }
            let cnorm = cg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if cnorm.is_finite() && cnorm < gnorm {
                beta = cand;
                prev_norm = cnorm;
                break;
            }
            lambda *= 0.5;
        }
        if prev_norm < cfg.score_tol {
            converged = true;
            break;
        }
    }
    if !converged && prev_norm >= cfg.score_tol {
        return Err(Error::NoConvergence {
            context: context.to_string(),
            iterations,
            residual: prev_norm,
        });
    }
    let mut coef = Array2::zeros((nfree, q));
    for r in 0..nfree {
        for j in 0..q {
            coef[(r, j)] = beta[r * q + j];
        }
    }
    Ok(MultinomialFit { coef, reference, n_categories, iterations, converged: true })
}
