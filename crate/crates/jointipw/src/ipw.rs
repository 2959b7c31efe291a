//! Inverse-probability-weighted fitting of the disease model and the
//! associated sandwich variances.
//!
//! Three variance flavors are provided:
//! * [`variance_known`] — treats the joint probabilities as known;
//! * [`variance_pseudolikelihood`] — corrects for logistic selection models
//!   estimated by the joint pseudolikelihood;
//! * [`variance_calibration`] — corrects for logistic selection models solved
//!   against population totals.
//!
//! Both corrected forms reduce exactly to [`variance_known`] when their
//! nuisance blocks are dropped, which the tests exploit as an internal
//! consistency check.

use crate::data::FitContext;
use crate::error::{Error, Result};
use crate::linalg;
use crate::selection::SelectionModelFit;
use crate::solvers::logistic::fit_weighted_logistic;
use crate::solvers::{expit, NewtonConfig};
use ndarray::{Array1, Array2};

/// Normal quantile for two-sided 95% intervals.
pub const Z_975: f64 = 1.959963984540054;

/// A fitted disease model with optional covariance.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub terms: Vec<String>,
    pub estimate: Array1<f64>,
    pub covariance: Option<Array2<f64>>,
    pub method: String,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn se(&self) -> Option<Array1<f64>> {
        self.covariance.as_ref().map(|v| {
            Array1::from_iter((0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()))
        })
    }

    /// 95% Wald intervals; `None` without a covariance.
    pub fn confidence_intervals(&self) -> Option<Vec<(f64, f64)>> {
        self.se().map(|se| {
            (0..se.len())
                .map(|j| {
                    (self.estimate[j] - Z_975 * se[j], self.estimate[j] + Z_975 * se[j])
                })
                .collect()
        })
    }
}

/// Solves the weighted disease-model score
/// `(1/N) sum_i (1/pi_i) (D_i - expit(theta' Z_i)) Z_i = 0`.
pub fn fit_ipw(
    ctx: &FitContext,
    selection: &SelectionModelFit,
    cfg: &NewtonConfig,
) -> Result<EstimateReport> {
    let weights = Array1::from_iter(selection.pi_joint.iter().map(|&p| 1.0 / p));
    let fit = fit_weighted_logistic(
        &ctx.disease_design,
        &ctx.outcome,
        &weights,
        None,
        None,
        cfg,
        "weighted disease model",
    )?;
    let mut warnings = selection.warnings.clone();
    if fit.separation {
        warnings.push("disease model shows signs of separation".into());
    }
    Ok(EstimateReport {
        terms: ctx.disease_terms.clone(),
        estimate: fit.coef,
        covariance: None,
        method: format!("ipw-{}", selection.method.label()),
        converged: fit.converged,
        iterations: fit.iterations,
        residual: fit.residual,
        warnings,
    })
}

/// Unweighted logistic fit of the disease model (the naive comparator), with
/// the inverse-Fisher covariance.
pub fn fit_unweighted(ctx: &FitContext, cfg: &NewtonConfig) -> Result<EstimateReport> {
    let fit = crate::solvers::logistic::fit_logistic(
        &ctx.disease_design,
        &ctx.outcome,
        cfg,
        "unweighted disease model",
    )?;
    let covariance = linalg::inverse_checked(&fit.fisher, 1e12).ok_or(Error::SingularBread)?;
    Ok(EstimateReport {
        terms: ctx.disease_terms.clone(),
        estimate: fit.coef,
        covariance: Some(covariance),
        method: "unweighted".into(),
        converged: fit.converged,
        iterations: fit.iterations,
        residual: fit.residual,
        warnings: Vec::new(),
    })
}

/// Per-row quantities shared by the sandwich assemblies.
struct RowTerms {
    /// expit'(theta' z) per internal row
    deriv: Vec<f64>,
    /// D - expit(theta' z) per internal row
    resid: Vec<f64>,
}

fn row_terms(ctx: &FitContext, theta: &Array1<f64>) -> RowTerms {
    let n = ctx.n_internal();
    let p = ctx.disease_design.ncols();
    let mut deriv = vec![0.0; n];
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| ctx.disease_design[(i, j)] * theta[j]).sum();
        let mu = expit(eta);
        deriv[i] = mu * (1.0 - mu);
        resid[i] = ctx.outcome[i] - mu;
    }
    RowTerms { deriv, resid }
}

/// Bread `(1/N) sum (1/pi) expit' z z'` and meat `(1/N) sum (1/pi)^2 r^2 z z'`.
fn bread_and_meat(
    ctx: &FitContext,
    pi_joint: &Array1<f64>,
    rt: &RowTerms,
) -> (Array2<f64>, Array2<f64>) {
    let n = ctx.n_internal();
    let p = ctx.disease_design.ncols();
    let big_n = ctx.n_population;
    let mut bread: Array2<f64> = Array2::zeros((p, p));
    let mut meat: Array2<f64> = Array2::zeros((p, p));
    for i in 0..n {
        let w = 1.0 / pi_joint[i];
        let wb = w * rt.deriv[i] / big_n;
        let wm = w * w * rt.resid[i] * rt.resid[i] / big_n;
        for j in 0..p {
            let zb = wb * ctx.disease_design[(i, j)];
            let zm = wm * ctx.disease_design[(i, j)];
            for l in 0..p {
                bread[(j, l)] += zb * ctx.disease_design[(i, l)];
                meat[(j, l)] += zm * ctx.disease_design[(i, l)];
            }
        }
    }
    (bread, meat)
}

fn sandwich(bread: &Array2<f64>, meat: &Array2<f64>, big_n: f64) -> Result<Array2<f64>> {
    let inv = linalg::inverse_checked(bread, 1e12).ok_or(Error::SingularBread)?;
    Ok(inv.dot(meat).dot(&inv.t()) / big_n)
}

/// Sandwich variance treating the joint probabilities as known.
pub fn variance_known(
    ctx: &FitContext,
    theta: &Array1<f64>,
    pi_joint: &Array1<f64>,
) -> Result<Array2<f64>> {
    let rt = row_terms(ctx, theta);
    let (bread, meat) = bread_and_meat(ctx, pi_joint, &rt);
    sandwich(&bread, &meat, ctx.n_population)
}

/// Nuisance geometry shared by the corrected variances: the stacked
/// per-cohort design dimension and helpers to build stacked vectors.
struct Stacked {
    offsets: Vec<usize>,
    total: usize,
}

fn stacked_dims(ctx: &FitContext) -> Stacked {
    let mut offsets = Vec::with_capacity(ctx.k);
    let mut total = 0;
    for k in 0..ctx.k {
        offsets.push(total);
        total += ctx.sel_design[k].ncols();
    }
    Stacked { offsets, total }
}

/// `G_alpha`: the p x Q derivative of the weighted disease score with respect
/// to the stacked selection coefficients. Shared by both corrected variances.
fn g_alpha(ctx: &FitContext, selection: &SelectionModelFit, rt: &RowTerms, st: &Stacked) -> Array2<f64> {
    let n = ctx.n_internal();
    let p = ctx.disease_design.ncols();
    let big_n = ctx.n_population;
    let mut g: Array2<f64> = Array2::zeros((p, st.total));
    for i in 0..n {
        let pi = selection.pi_joint[i];
        // (1/pi^2) * prod_k (1 - pi_k) = (1 - pi) / pi^2
        let base = -(1.0 - pi) / (pi * pi) * rt.resid[i] / big_n;
        for k in 0..ctx.k {
            let pik = selection.pi_internal[(i, k)];
            let off = st.offsets[k];
            let qk = ctx.sel_design[k].ncols();
            for j in 0..p {
                let zj = base * ctx.disease_design[(i, j)] * pik;
                for c in 0..qk {
                    g[(j, off + c)] += zj * ctx.sel_design[k][(i, c)];
                }
            }
        }
    }
    g
}

/// Sandwich variance for the pseudolikelihood backend, accounting for the
/// estimated selection coefficients. `include_nuisance = false` drops every
/// nuisance block, reproducing [`variance_known`] exactly.
pub fn variance_pseudolikelihood(
    ctx: &FitContext,
    selection: &SelectionModelFit,
    theta: &Array1<f64>,
    include_nuisance: bool,
) -> Result<Array2<f64>> {
    let rt = row_terms(ctx, theta);
    let (bread, mut meat) = bread_and_meat(ctx, &selection.pi_joint, &rt);
    if include_nuisance {
        let st = stacked_dims(ctx);
        let n = ctx.n_internal();
        let n_ext = ctx.n_external();
        let p = ctx.disease_design.ncols();
        let big_n = ctx.n_population;
        // H: block-diagonal information of the selection scores over the
        // external sample.
        let mut h: Array2<f64> = Array2::zeros((st.total, st.total));
        for e in 0..n_ext {
            for k in 0..ctx.k {
                let pik = selection.pi_external[(e, k)];
                let w = -pik * (1.0 - pik) / (ctx.ext_pi[e] * big_n);
                let off = st.offsets[k];
                let qk = ctx.ext_sel_design[k].ncols();
                for c in 0..qk {
                    let base = w * ctx.ext_sel_design[k][(e, c)];
                    for d in 0..qk {
                        h[(off + c, off + d)] += base * ctx.ext_sel_design[k][(e, d)];
                    }
                }
            }
        }
        let h_inv = linalg::inverse_checked(&h, 1e12).ok_or(Error::SingularH)?;
        let ga = g_alpha(ctx, selection, &rt, &st);
        let gh = ga.dot(&h_inv); // p x Q

        // stacked vectors per internal row
        let stacked_members = |i: usize| -> Array1<f64> {
            let mut a = Array1::zeros(st.total);
            for k in 0..ctx.k {
                if ctx.s[(i, k)] > 0.5 {
                    let off = st.offsets[k];
                    for c in 0..ctx.sel_design[k].ncols() {
                        a[off + c] = ctx.sel_design[k][(i, c)];
                    }
                }
            }
            a
        };
        let stacked_pi_design_internal = |i: usize| -> Array1<f64> {
            let mut b = Array1::zeros(st.total);
            for k in 0..ctx.k {
                let off = st.offsets[k];
                let pik = selection.pi_internal[(i, k)];
                for c in 0..ctx.sel_design[k].ncols() {
                    b[off + c] = pik * ctx.sel_design[k][(i, c)];
                }
            }
            b
        };
        let stacked_pi_design_external = |e: usize| -> Array1<f64> {
            let mut b = Array1::zeros(st.total);
            for k in 0..ctx.k {
                let off = st.offsets[k];
                let pik = selection.pi_external[(e, k)];
                for c in 0..ctx.ext_sel_design[k].ncols() {
                    b[off + c] = pik * ctx.ext_sel_design[k][(e, c)];
                }
            }
            b
        };

        // E2 pieces: (1/N) sum over selected rows of (1/pi) a_i u_i', minus
        // (1/N) sum over shared rows of (1/pi)(1/pi_ext) b_i u_i'.
        let mut cross: Array2<f64> = Array2::zeros((st.total, p)); // Q x p accumulator
        for i in 0..n {
            let w = 1.0 / selection.pi_joint[i];
            let a = stacked_members(i);
            let base = w * rt.resid[i] / big_n;
            for c in 0..st.total {
                if a[c] == 0.0 {
                    continue;
                }
                let v = base * a[c];
                for j in 0..p {
                    cross[(c, j)] += v * ctx.disease_design[(i, j)];
                }
            }
        }
        for &(i, e) in &ctx.overlap {
            let w = 1.0 / selection.pi_joint[i];
            let b = stacked_pi_design_internal(i);
            let base = -w / ctx.ext_pi[e] * rt.resid[i] / big_n;
            for c in 0..st.total {
                let v = base * b[c];
                for j in 0..p {
                    cross[(c, j)] += v * ctx.disease_design[(i, j)];
                }
            }
        }
        let e2 = gh.dot(&cross); // p x p

        // E4 inner matrix: (1/N) [ sum a a' - 2 sum_shared (b/pi_ext) a'
        //                          + sum_ext (b/pi_ext)(b/pi_ext)' ].
        let mut inner: Array2<f64> = Array2::zeros((st.total, st.total));
        for i in 0..n {
            let a = stacked_members(i);
            for c in 0..st.total {
                if a[c] == 0.0 {
                    continue;
                }
                let v = a[c] / big_n;
                for d in 0..st.total {
                    inner[(c, d)] += v * a[d];
                }
            }
        }
        for &(i, e) in &ctx.overlap {
            let a = stacked_members(i);
            let b = stacked_pi_design_internal(i) / ctx.ext_pi[e];
            for c in 0..st.total {
                let v = -2.0 * b[c] / big_n;
                if v == 0.0 {
                    continue;
                }
                for d in 0..st.total {
                    inner[(c, d)] += v * a[d];
                }
            }
        }
        for e in 0..n_ext {
            let b = stacked_pi_design_external(e) / ctx.ext_pi[e];
            for c in 0..st.total {
                let v = b[c] / big_n;
                for d in 0..st.total {
                    inner[(c, d)] += v * b[d];
                }
            }
        }
        let e4 = gh.dot(&inner).dot(&gh.t());

        meat = &meat - &e2 - &e2.t() + &e4;
    }
    sandwich(&bread, &meat, ctx.n_population)
}

/// Sandwich variance for the calibration backend, accounting for the
/// estimated selection coefficients.
pub fn variance_calibration(
    ctx: &FitContext,
    selection: &SelectionModelFit,
    theta: &Array1<f64>,
    include_nuisance: bool,
) -> Result<Array2<f64>> {
    let rt = row_terms(ctx, theta);
    let (bread, mut meat) = bread_and_meat(ctx, &selection.pi_joint, &rt);
    if include_nuisance {
        let st = stacked_dims(ctx);
        let n = ctx.n_internal();
        let p = ctx.disease_design.ncols();
        let big_n = ctx.n_population;
        // H: block-diagonal calibration information over the cohort members.
        let mut h: Array2<f64> = Array2::zeros((st.total, st.total));
        for i in 0..n {
            for k in 0..ctx.k {
                if ctx.s[(i, k)] < 0.5 {
                    continue;
                }
                let pik = selection.pi_internal[(i, k)];
                let w = -(1.0 - pik) / (pik * big_n);
                let off = st.offsets[k];
                let qk = ctx.sel_design[k].ncols();
                for c in 0..qk {
                    let base = w * ctx.sel_design[k][(i, c)];
                    for d in 0..qk {
                        h[(off + c, off + d)] += base * ctx.sel_design[k][(i, d)];
                    }
                }
            }
        }
        let h_inv = linalg::inverse_checked(&h, 1e12).ok_or(Error::SingularH)?;
        let ga = g_alpha(ctx, selection, &rt, &st);
        let gh = ga.dot(&h_inv);

        let stacked_weighted_members = |i: usize| -> Array1<f64> {
            let mut a = Array1::zeros(st.total);
            for k in 0..ctx.k {
                if ctx.s[(i, k)] > 0.5 {
                    let off = st.offsets[k];
                    let w = 1.0 / selection.pi_internal[(i, k)];
                    for c in 0..ctx.sel_design[k].ncols() {
                        a[off + c] = w * ctx.sel_design[k][(i, c)];
                    }
                }
            }
            a
        };
        let stacked_design = |i: usize| -> Array1<f64> {
            let mut d = Array1::zeros(st.total);
            for k in 0..ctx.k {
                let off = st.offsets[k];
                for c in 0..ctx.sel_design[k].ncols() {
                    d[off + c] = ctx.sel_design[k][(i, c)];
                }
            }
            d
        };

        // E2: (1/N) sum (1/pi) a_i u_i' - (1/N) sum (1/pi) d_i u_i'.
        let mut cross: Array2<f64> = Array2::zeros((st.total, p));
        for i in 0..n {
            let w = 1.0 / selection.pi_joint[i];
            let a = stacked_weighted_members(i);
            let d = stacked_design(i);
            let base = w * rt.resid[i] / big_n;
            for c in 0..st.total {
                let v = base * (a[c] - d[c]);
                if v == 0.0 {
                    continue;
                }
                for j in 0..p {
                    cross[(c, j)] += v * ctx.disease_design[(i, j)];
                }
            }
        }
        let e2 = gh.dot(&cross);

        // E4 inner: (1/N) sum [ a a' - 2 d a' + (1/pi) d d' ].
        let mut inner: Array2<f64> = Array2::zeros((st.total, st.total));
        for i in 0..n {
            let w = 1.0 / selection.pi_joint[i];
            let a = stacked_weighted_members(i);
            let d = stacked_design(i);
            for c in 0..st.total {
                let va = a[c] / big_n;
                let vd = d[c] / big_n;
                for l in 0..st.total {
                    inner[(c, l)] += va * a[l] - 2.0 * vd * a[l] + w * vd * d[l];
                }
            }
        }
        let e4 = gh.dot(&inner).dot(&gh.t());

        meat = &meat - &e2 - &e2.t() + &e4;
    }
    sandwich(&bread, &meat, ctx.n_population)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_context, CombinedSample, ExternalSample, VariableRoles};
    use crate::selection::{fit_known, fit_pseudolikelihood};
    use crate::data::KnownWeights;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A small two-cohort world with a known selection mechanism.
    fn toy_world(seed: u64, n_pop: usize) -> (CombinedSample, ExternalSample, KnownWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut outcome = Vec::new();
        let mut cov = Vec::new();
        let mut mem = Vec::new();
        let mut eids = Vec::new();
        let mut ecov = Vec::new();
        let mut epi = Vec::new();
        let mut wid = Vec::new();
        let mut wk = Vec::new();
        let mut wj = Vec::new();
        for id in 0..n_pop as i64 {
            let z: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let w: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let d = if rng.gen::<f64>() < expit(-0.5 + 0.8 * z) { 1.0 } else { 0.0 };
            let p1 = expit(-1.0 + 0.9 * w + 0.5 * d);
            let p2 = expit(-1.5 + 0.6 * z);
            let s1 = rng.gen::<f64>() < p1;
            let s2 = rng.gen::<f64>() < p2;
            let pe = 0.5 * expit(0.2 * z - 0.1 * w);
            let se = rng.gen::<f64>() < pe;
            if s1 || s2 {
                ids.push(id);
                outcome.push(d);
                cov.extend_from_slice(&[z, w]);
                mem.extend_from_slice(&[s1 as i32 as f64, s2 as i32 as f64]);
                wid.push(id);
                wk.extend_from_slice(&[p1, p2]);
                wj.push(1.0 - (1.0 - p1) * (1.0 - p2));
            }
            if se {
                eids.push(id);
                ecov.extend_from_slice(&[d, z, w]);
                epi.push(pe);
            }
        }
        let n = ids.len();
        let ne = eids.len();
        (
            CombinedSample {
                ids,
                outcome: Array1::from(outcome),
                covariate_names: vec!["Z".into(), "W".into()],
                covariates: Array2::from_shape_vec((n, 2), cov).unwrap(),
                membership: Array2::from_shape_vec((n, 2), mem).unwrap(),
            },
            ExternalSample {
                ids: eids,
                covariate_names: vec!["D".into(), "Z".into(), "W".into()],
                covariates: Array2::from_shape_vec((ne, 3), ecov).unwrap(),
                pi_ext: Array1::from(epi),
            },
            KnownWeights {
                ids: wid,
                pi_k: Array2::from_shape_vec((n, 2), wk).unwrap(),
                pi_joint: Array1::from(wj),
            },
        )
    }

    fn toy_roles() -> VariableRoles {
        VariableRoles {
            disease: vec!["Z".into()],
            aux_shared: vec![],
            selection: vec![vec!["W".into(), "D".into()], vec!["Z".into()]],
            aux_features: vec![],
        }
    }

    #[test]
    fn known_weights_recover_truth_approximately() {
        let (sample, external, weights) = toy_world(1, 40000);
        let ctx = build_context(&sample, &external, &toy_roles(), Some(40000.0)).unwrap();
        let sel = fit_known(&ctx, &weights, 1e-6).unwrap();
        let fit = fit_ipw(&ctx, &sel, &NewtonConfig::default()).unwrap();
        assert_abs_diff_eq!(fit.estimate[0], -0.5, epsilon = 0.08);
        assert_abs_diff_eq!(fit.estimate[1], 0.8, epsilon = 0.12);
    }

    #[test]
    fn pseudolikelihood_close_to_known_weights() {
        let (sample, external, weights) = toy_world(2, 40000);
        let ctx = build_context(&sample, &external, &toy_roles(), Some(40000.0)).unwrap();
        let sel_known = fit_known(&ctx, &weights, 1e-6).unwrap();
        let sel_pl = fit_pseudolikelihood(&ctx, &NewtonConfig::default(), 1e-6).unwrap();
        let f1 = fit_ipw(&ctx, &sel_known, &NewtonConfig::default()).unwrap();
        let f2 = fit_ipw(&ctx, &sel_pl, &NewtonConfig::default()).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(f1.estimate[j], f2.estimate[j], epsilon = 0.1);
        }
    }

    #[test]
    fn corrected_variance_reduces_to_known_weight_form() {
        let (sample, external, _) = toy_world(3, 20000);
        let ctx = build_context(&sample, &external, &toy_roles(), Some(20000.0)).unwrap();
        let sel = fit_pseudolikelihood(&ctx, &NewtonConfig::default(), 1e-6).unwrap();
        let fit = fit_ipw(&ctx, &sel, &NewtonConfig::default()).unwrap();
        let reduced =
            variance_pseudolikelihood(&ctx, &sel, &fit.estimate, false).unwrap();
        let known = variance_known(&ctx, &fit.estimate, &sel.pi_joint).unwrap();
        for j in 0..2 {
            for l in 0..2 {
                assert_abs_diff_eq!(reduced[(j, l)], known[(j, l)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn corrected_variance_is_positive_semidefinite() {
        let (sample, external, _) = toy_world(4, 20000);
        let ctx = build_context(&sample, &external, &toy_roles(), Some(20000.0)).unwrap();
        let sel = fit_pseudolikelihood(&ctx, &NewtonConfig::default(), 1e-6).unwrap();
        let fit = fit_ipw(&ctx, &sel, &NewtonConfig::default()).unwrap();
        let v = variance_pseudolikelihood(&ctx, &sel, &fit.estimate, true).unwrap();
        let eig = crate::linalg::symmetric_eigenvalues(&v);
        for e in eig {
            assert!(e > -1e-12, "eigenvalue {e} below tolerance");
        }
        // diagonal should be positive and finite
        for j in 0..2 {
            assert!(v[(j, j)] > 0.0 && v[(j, j)].is_finite());
        }
    }

    #[test]
    fn confidence_interval_uses_normal_quantile() {
        let mut report = EstimateReport {
            terms: vec!["(Intercept)".into()],
            estimate: Array1::from(vec![1.0]),
            covariance: Some(Array2::from_shape_vec((1, 1), vec![0.04]).unwrap()),
            method: "test".into(),
            converged: true,
            iterations: 1,
            residual: 0.0,
            warnings: Vec::new(),
        };
        let ci = report.confidence_intervals().unwrap();
        assert_abs_diff_eq!(ci[0].0, 1.0 - Z_975 * 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(ci[0].1, 1.0 + Z_975 * 0.2, epsilon = 1e-12);
        report.covariance = None;
        assert!(report.confidence_intervals().is_none());
    }
}
