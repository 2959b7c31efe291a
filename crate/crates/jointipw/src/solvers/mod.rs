//! Root finders and regression fitters shared by the selection models and the
//! disease-model estimators.
//!
//! Everything here is deterministic given its inputs (and, for the boosted
//! regressor, its seed), which is what makes the simulation harness
//! reproducible end to end.

pub mod gbrt;
pub mod logistic;
pub mod multinomial;
pub mod simplex;

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2};

/// Shared stopping and safeguard settings for the damped Newton iterations.
#[derive(Debug, Clone)]
pub struct NewtonConfig {
    /// Stop when the max-norm of the score falls below this.
    pub score_tol: f64,
    /// Stop when the max-norm of the step falls below this.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Number of step-halvings tried before accepting a non-decreasing step.
    pub max_halvings: usize,
    /// Condition-estimate ceiling beyond which the Jacobian counts as singular.
    pub cond_limit: f64,
    /// Parameter-norm threshold that triggers a separation warning.
    pub separation_norm: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            score_tol: 1e-8,
            step_tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            cond_limit: 1e12,
            separation_norm: 1e4,
        }
    }
}

/// Outcome of a Newton run. `params` always holds the best iterate seen, so a
/// caller that tolerates soft failures can still use it.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub params: Array1<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set when the iterate norm exceeded the separation threshold.
    pub separation: bool,
}

fn max_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Damped Newton iteration on `score(params) = 0` with Jacobian `jac`.
///
/// The step is halved until the score norm decreases (up to
/// `max_halvings`); an ill-conditioned Jacobian aborts with
/// [`Error::SingularJacobian`]. Non-convergence within the budget returns
/// [`Error::NoConvergence`]; the best iterate is recoverable from the error
/// context by rerunning with a larger budget, so the error carries only the
/// residual.
pub fn newton_solve<S, J>(
    init: Array1<f64>,
    score: S,
    jac: J,
    cfg: &NewtonConfig,
    context: &str,
) -> Result<NewtonResult>
where
    S: Fn(&Array1<f64>) -> Array1<f64>,
    J: Fn(&Array1<f64>) -> Array2<f64>,
{
    let mut params = init;
    let mut g = score(&params);
    let mut gnorm = max_norm(&g);
    if !gnorm.is_finite() {
        return Err(Error::NoConvergence { context: context.to_string(), iterations: 0, residual: gnorm });
    }
    let mut separation = false;
    for iter in 1..=cfg.max_iter {
        if gnorm < cfg.score_tol {
            return Ok(NewtonResult { params, iterations: iter - 1, residual: gnorm, converged: true, separation });
        }
        let j = jac(&params);
        let step = linalg::solve_checked(&j, &g, cfg.cond_limit)
            .ok_or_else(|| Error::SingularJacobian { context: context.to_string() })?;
        // Newton step is params - J^{-1} g when J is the Jacobian of the score.
        let mut lambda = 1.0;
        let mut accepted = false;
        let mut cand = params.clone();
        let mut cand_g = g.clone();
        let mut cand_norm = gnorm;
        for _ in 0..=cfg.max_halvings {
            cand = &params - &(lambda * &step);
            cand_g = score(&cand);
            cand_norm = max_norm(&cand_g);
            if cand_norm.is_finite() && cand_norm < gnorm {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted && !cand_norm.is_finite() {
            return Err(Error::NoConvergence { context: context.to_string(), iterations: iter, residual: gnorm });
        }
        let step_size = max_norm(&(&cand - &params));
        params = cand;
        g = cand_g;
        gnorm = cand_norm;
        if params.iter().map(|x| x * x).sum::<f64>().sqrt() > cfg.separation_norm {
            separation = true;
        }
        if step_size < cfg.step_tol && gnorm < cfg.score_tol.max(1e-6) {
            return Ok(NewtonResult { params, iterations: iter, residual: gnorm, converged: true, separation });
        }
        if step_size < f64::EPSILON && !accepted {
            // Stalled: cannot improve further in floating point.
            break;
        }
    }
    if gnorm < cfg.score_tol {
        return Ok(NewtonResult { params, iterations: cfg.max_iter, residual: gnorm, converged: true, separation });
    }
    Err(Error::NoConvergence { context: context.to_string(), iterations: cfg.max_iter, residual: gnorm })
}

/// Numerically stable logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`expit`].
pub fn expit_deriv(x: f64) -> f64 {
    let p = expit(x);
    p * (1.0 - p)
}
