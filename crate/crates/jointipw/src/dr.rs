//! The augmented (doubly robust) estimator: alternating auxiliary-model
//! refits and weighted score solves, the approximate sandwich variance that
//! treats the nuisance fits as fixed, and a paired bootstrap.

use crate::auxscore::{AuxScoreBuilder, AuxValues};
use crate::data::{build_context, CombinedSample, ExternalSample, FitContext, VariableRoles};
use crate::error::{Error, Result};
use crate::ipw::EstimateReport;
use crate::linalg;
use crate::selection::SelectionModelFit;
use crate::solvers::logistic::fit_weighted_logistic;
use crate::solvers::{expit, NewtonConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct AugmentedConfig {
    pub newton: NewtonConfig,
    /// Outer-loop tolerance on the coefficient step.
    pub eps_theta: f64,
    /// Outer-loop tolerance on the change of the estimating-function value.
    pub eps_score: f64,
    pub max_outer: usize,
}

impl Default for AugmentedConfig {
    fn default() -> Self {
        AugmentedConfig {
            newton: NewtonConfig::default(),
            eps_theta: 1e-8,
            eps_score: 1e-8,
            max_outer: 50,
        }
    }
}

/// Value of the augmented estimating function at `theta` for fixed auxiliary
/// values: `(1/N) sum_sel (1/pi)(U_i - f_i) + (1/N) sum_ext (1/pi_ext) f_e`.
fn estimating_function(
    ctx: &FitContext,
    pi_joint: &Array1<f64>,
    aux: &AuxValues,
    theta: &Array1<f64>,
) -> Array1<f64> {
    let n = ctx.n_internal();
    let p = ctx.disease_design.ncols();
    let big_n = ctx.n_population;
    let mut f1: Array1<f64> = Array1::zeros(p);
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| ctx.disease_design[(i, j)] * theta[j]).sum();
        let r = ctx.outcome[i] - expit(eta);
        let w = 1.0 / (pi_joint[i] * big_n);
        for j in 0..p {
            f1[j] += w * (r * ctx.disease_design[(i, j)] - aux.internal[(i, j)]);
        }
    }
    for e in 0..ctx.n_external() {
        let w = 1.0 / (ctx.ext_pi[e] * big_n);
        for j in 0..p {
            f1[j] += w * aux.external[(e, j)];
        }
    }
    f1
}

/// Constant offset that turns the augmented equation into a weighted
/// logistic score: `sum_sel (1/pi) f_i - sum_ext (1/pi_ext) f_e`.
fn aux_offset(ctx: &FitContext, pi_joint: &Array1<f64>, aux: &AuxValues) -> Array1<f64> {
    let p = ctx.disease_design.ncols();
    let mut off: Array1<f64> = Array1::zeros(p);
    for i in 0..ctx.n_internal() {
        let w = 1.0 / pi_joint[i];
        for j in 0..p {
            off[j] += w * aux.internal[(i, j)];
        }
    }
    for e in 0..ctx.n_external() {
        let w = 1.0 / ctx.ext_pi[e];
        for j in 0..p {
            off[j] -= w * aux.external[(e, j)];
        }
    }
    off
}

fn inner_solve(
    ctx: &FitContext,
    pi_joint: &Array1<f64>,
    aux: &AuxValues,
    init: Array1<f64>,
    newton: &NewtonConfig,
) -> Result<Array1<f64>> {
    let weights = Array1::from_iter(pi_joint.iter().map(|&p| 1.0 / p));
    let off = aux_offset(ctx, pi_joint, aux);
    let fit = fit_weighted_logistic(
        &ctx.disease_design,
        &ctx.outcome,
        &weights,
        Some(&off),
        Some(init),
        newton,
        "augmented inner solve",
    )?;
    Ok(fit.coef)
}

/// Solves the augmented estimating equation by alternating auxiliary-model
/// fits and inner weighted-score solves.
///
/// If the outer budget is exhausted the best iterate is still returned, with
/// `converged = false` and a warning; callers that require strict convergence
/// should check the flag.
pub fn solve_augmented(
    ctx: &FitContext,
    selection: &SelectionModelFit,
    builder: &dyn AuxScoreBuilder,
    cfg: &AugmentedConfig,
) -> Result<EstimateReport> {
    let pi_joint = &selection.pi_joint;
    // initialization: unweighted logistic
    let init = crate::solvers::logistic::fit_logistic(
        &ctx.disease_design,
        &ctx.outcome,
        &cfg.newton,
        "augmented initialization",
    )?;
    let mut theta = init.coef;
    let mut prev_f1: Option<Array1<f64>> = None;
    let mut best_theta = theta.clone();
    let mut best_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for m in 1..=cfg.max_outer {
        iterations = m;
        let aux = builder.build(ctx, &theta, None)?;
        let new_theta = inner_solve(ctx, pi_joint, &aux, theta.clone(), &cfg.newton)?;
        let f1 = estimating_function(ctx, pi_joint, &aux, &new_theta);
        let step = (&new_theta - &theta).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let f1_change = match &prev_f1 {
            Some(prev) => (&f1 - prev).iter().fold(0.0f64, |a, v| a.max(v.abs())),
            None => f64::INFINITY,
        };
        residual = f1.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if step < best_step {
            best_step = step;
            best_theta = new_theta.clone();
        }
        theta = new_theta;
        prev_f1 = Some(f1);
        if step < cfg.eps_theta && f1_change < cfg.eps_score {
            converged = true;
            break;
        }
    }
    let mut warnings = selection.warnings.clone();
    if !converged {
        warnings.push(format!(
            "outer loop did not converge within {} iterations; best step {:.3e}",
            cfg.max_outer, best_step
        ));
        theta = best_theta;
    }
    Ok(EstimateReport {
        terms: ctx.disease_terms.clone(),
        estimate: theta,
        covariance: None,
        method: format!("augmented-{}", selection.method.label()),
        converged,
        iterations,
        residual,
        warnings,
    })
}

/// Cohort-sum variant for disjoint cohorts: each cohort contributes its own
/// weighted score with a cohort-specific auxiliary model and cohort
/// probabilities. With one cohort this coincides with [`solve_augmented`].
pub fn solve_augmented_no_overlap(
    ctx: &FitContext,
    selection: &SelectionModelFit,
    builder: &dyn AuxScoreBuilder,
    cfg: &AugmentedConfig,
) -> Result<EstimateReport> {
    let n = ctx.n_internal();
    for i in 0..n {
        let total: f64 = (0..ctx.k).map(|k| ctx.s[(i, k)]).sum();
        if total > 1.5 {
            return Err(Error::OverlapPresent);
        }
    }
    // per-row weight: 1 / pi_{k(i)} for the row's own cohort
    let mut weights = Array1::zeros(n);
    let mut cohort_of = vec![0usize; n];
    for i in 0..n {
        for k in 0..ctx.k {
            if ctx.s[(i, k)] > 0.5 {
                weights[i] = 1.0 / selection.pi_internal[(i, k)].max(1e-12);
                cohort_of[i] = k;
            }
        }
    }
    let cohort_rows: Vec<Vec<usize>> = (0..ctx.k).map(|k| ctx.cohort_rows(k)).collect();
    let p = ctx.disease_design.ncols();

    let init = crate::solvers::logistic::fit_logistic(
        &ctx.disease_design,
        &ctx.outcome,
        &cfg.newton,
        "augmented initialization",
    )?;
    let mut theta = init.coef;
    let mut prev_f1: Option<Array1<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for m in 1..=cfg.max_outer {
        iterations = m;
        // cohort-specific auxiliary models, trained on each cohort's rows
        let auxes: Vec<AuxValues> = (0..ctx.k)
            .map(|k| builder.build(ctx, &theta, Some(&cohort_rows[k])))
            .collect::<Result<Vec<_>>>()?;
        // offset: sum_k [ sum_{i in k} (1/pi_k) f_k,i - sum_ext (1/pi_ext) f_k,e ]
        let mut off: Array1<f64> = Array1::zeros(p);
        for k in 0..ctx.k {
            for &i in &cohort_rows[k] {
                let w = weights[i];
                for j in 0..p {
                    off[j] += w * auxes[k].internal[(i, j)];
                }
            }
            for e in 0..ctx.n_external() {
                let w = 1.0 / ctx.ext_pi[e];
                for j in 0..p {
                    off[j] -= w * auxes[k].external[(e, j)];
                }
            }
        }
        let fit = fit_weighted_logistic(
            &ctx.disease_design,
            &ctx.outcome,
            &weights,
            Some(&off),
            Some(theta.clone()),
            &cfg.newton,
            "augmented inner solve (no overlap)",
        )?;
        let new_theta = fit.coef;
        // estimating-function value at the new theta
        let mut f1: Array1<f64> = Array1::zeros(p);
        let big_n = ctx.n_population;
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| ctx.disease_design[(i, j)] * new_theta[j]).sum();
            let r = ctx.outcome[i] - expit(eta);
            let k = cohort_of[i];
            for j in 0..p {
                f1[j] += weights[i] * (r * ctx.disease_design[(i, j)] - auxes[k].internal[(i, j)])
                    / big_n;
            }
        }
        for k in 0..ctx.k {
            for e in 0..ctx.n_external() {
                for j in 0..p {
                    f1[j] += auxes[k].external[(e, j)] / (ctx.ext_pi[e] * big_n);
                }
            }
        }
        let step = (&new_theta - &theta).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let f1_change = match &prev_f1 {
            Some(prev) => (&f1 - prev).iter().fold(0.0f64, |a, v| a.max(v.abs())),
            None => f64::INFINITY,
        };
        residual = f1.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        theta = new_theta;
        prev_f1 = Some(f1);
        if step < cfg.eps_theta && f1_change < cfg.eps_score {
            converged = true;
            break;
        }
    }
    let mut warnings = selection.warnings.clone();
    if !converged {
        warnings.push(format!(
            "outer loop did not converge within {} iterations",
            cfg.max_outer
        ));
    }
    Ok(EstimateReport {
        terms: ctx.disease_terms.clone(),
        estimate: theta,
        covariance: None,
        method: format!("augmented-disjoint-{}", selection.method.label()),
        converged,
        iterations,
        residual,
        warnings,
    })
}

/// Approximate sandwich variance for the augmented estimator, treating the
/// selection and auxiliary fits as fixed. The derivative of the auxiliary
/// score with respect to the coefficients is approximated by central finite
/// differences (step `1e-5 * (1 + |theta_j|)`), rebuilding the auxiliary
/// model at each perturbed value so that training-target dependence on the
/// coefficients is captured.
pub fn variance_augmented_approx(
    ctx: &FitContext,
    selection: &SelectionModelFit,
    builder: &dyn AuxScoreBuilder,
    theta: &Array1<f64>,
) -> Result<Array2<f64>> {
    let n = ctx.n_internal();
    let n_ext = ctx.n_external();
    let p = ctx.disease_design.ncols();
    let big_n = ctx.n_population;
    let pi_joint = &selection.pi_joint;
    let aux = builder.build(ctx, theta, None)?;

    // finite-difference derivatives of f per coefficient
    let mut dint: Vec<Array2<f64>> = Vec::with_capacity(p); // each n x p
    let mut dext: Vec<Array2<f64>> = Vec::with_capacity(p);
    for j in 0..p {
        let h = 1e-5 * (1.0 + theta[j].abs());
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        let ap = builder.build(ctx, &tp, None)?;
        let am = builder.build(ctx, &tm, None)?;
        dint.push((&ap.internal - &am.internal) / (2.0 * h));
        dext.push((&ap.external - &am.external) / (2.0 * h));
    }

    // bread: -(1/N) sum_sel (1/pi)[expit' z z' + df/dtheta]
    //        + (1/N) sum_ext (1/pi_ext) df/dtheta
    let mut bread: Array2<f64> = Array2::zeros((p, p));
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| ctx.disease_design[(i, j)] * theta[j]).sum();
        let mu = expit(eta);
        let w = 1.0 / (pi_joint[i] * big_n);
        for r in 0..p {
            for c in 0..p {
                bread[(r, c)] -= w
                    * (mu * (1.0 - mu) * ctx.disease_design[(i, r)] * ctx.disease_design[(i, c)]
                        + dint[c][(i, r)]);
            }
        }
    }
    for e in 0..n_ext {
        let w = 1.0 / (ctx.ext_pi[e] * big_n);
        for r in 0..p {
            for c in 0..p {
                bread[(r, c)] += w * dext[c][(e, r)];
            }
        }
    }

    // meat
    let mut meat: Array2<f64> = Array2::zeros((p, p));
    let mut resid = vec![vec![0.0; p]; n];
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| ctx.disease_design[(i, j)] * theta[j]).sum();
        let r = ctx.outcome[i] - expit(eta);
        for j in 0..p {
            resid[i][j] = r * ctx.disease_design[(i, j)] - aux.internal[(i, j)];
        }
        let w2 = 1.0 / (pi_joint[i] * pi_joint[i] * big_n);
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += w2 * resid[i][a] * resid[i][b];
            }
        }
    }
    for e in 0..n_ext {
        let w2 = 1.0 / (ctx.ext_pi[e] * ctx.ext_pi[e] * big_n);
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += w2 * aux.external[(e, a)] * aux.external[(e, b)];
            }
        }
    }
    for &(i, e) in &ctx.overlap {
        let w = 1.0 / (pi_joint[i] * ctx.ext_pi[e] * big_n);
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += w
                    * (resid[i][a] * aux.external[(e, b)] + aux.external[(e, a)] * resid[i][b]);
            }
        }
    }

    let inv = linalg::inverse_checked(&bread, 1e12).ok_or(Error::SingularBread)?;
    Ok(inv.dot(&meat).dot(&inv.t()) / big_n)
}

/// Nonparametric bootstrap covariance: the internal and external samples are
/// resampled independently with replacement, and `fit` re-runs the entire
/// pipeline on each pair. Replicates where `fit` fails are dropped; more than
/// 10% failures aborts with [`Error::TooManyFailedReplicates`].
pub fn variance_bootstrap<F>(
    sample: &CombinedSample,
    external: &ExternalSample,
    b: usize,
    seed: u64,
    fit: F,
) -> Result<Array2<f64>>
where
    F: Fn(&CombinedSample, &ExternalSample) -> Result<Array1<f64>> + Sync,
{
    let results: Vec<Option<Array1<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(rep as u64 + 1)));
            let rs = resample_internal(sample, &mut rng);
            let re = resample_external(external, &mut rng);
            fit(&rs, &re).ok()
        })
        .collect();
    let kept: Vec<&Array1<f64>> = results.iter().flatten().collect();
    let failed = b - kept.len();
    if failed * 10 > b {
        return Err(Error::TooManyFailedReplicates { failed, total: b });
    }
    if kept.len() < 2 {
        return Err(Error::TooFewRows { rows: kept.len(), required: 2 });
    }
    let p = kept[0].len();
    let m = kept.len() as f64;
    let mut mean: Array1<f64> = Array1::zeros(p);
    for t in &kept {
        mean = mean + *t;
    }
    mean /= m;
    let mut cov: Array2<f64> = Array2::zeros((p, p));
    for t in &kept {
        let d = *t - &mean;
        for a in 0..p {
            for c in 0..p {
                cov[(a, c)] += d[a] * d[c];
            }
        }
    }
    cov /= m - 1.0;
    Ok(cov)
}

fn resample_internal(sample: &CombinedSample, rng: &mut ChaCha8Rng) -> CombinedSample {
    let n = sample.ids.len();
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let k = sample.membership.ncols();
    let p = sample.covariates.ncols();
    let mut cov = Array2::zeros((n, p));
    let mut mem = Array2::zeros((n, k));
    let mut outcome = Array1::zeros(n);
    let mut ids = Vec::with_capacity(n);
    for (r, &i) in idx.iter().enumerate() {
        ids.push(sample.ids[i]);
        outcome[r] = sample.outcome[i];
        for c in 0..p {
            cov[(r, c)] = sample.covariates[(i, c)];
        }
        for c in 0..k {
            mem[(r, c)] = sample.membership[(i, c)];
        }
    }
    CombinedSample {
        ids,
        outcome,
        covariate_names: sample.covariate_names.clone(),
        covariates: cov,
        membership: mem,
    }
}

fn resample_external(external: &ExternalSample, rng: &mut ChaCha8Rng) -> ExternalSample {
    let n = external.ids.len();
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let p = external.covariates.ncols();
    let mut cov = Array2::zeros((n, p));
    let mut pi = Array1::zeros(n);
    let mut ids = Vec::with_capacity(n);
    for (r, &i) in idx.iter().enumerate() {
        ids.push(external.ids[i]);
        pi[r] = external.pi_ext[i];
        for c in 0..p {
            cov[(r, c)] = external.covariates[(i, c)];
        }
    }
    ExternalSample { ids, covariate_names: external.covariate_names.clone(), covariates: cov, pi_ext: pi }
}

/// Convenience: run the full augmented pipeline on fresh data, for bootstrap
/// closures. `selection_fit` maps a context to selection probabilities.
pub fn augmented_pipeline(
    sample: &CombinedSample,
    external: &ExternalSample,
    roles: &VariableRoles,
    n_population: Option<f64>,
    selection_fit: impl Fn(&FitContext) -> Result<SelectionModelFit>,
    builder: &dyn AuxScoreBuilder,
    cfg: &AugmentedConfig,
) -> Result<Array1<f64>> {
    let ctx = build_context(sample, external, roles, n_population)?;
    let sel = selection_fit(&ctx)?;
    let report = solve_augmented(&ctx, &sel, builder, cfg)?;
    Ok(report.estimate)
}
