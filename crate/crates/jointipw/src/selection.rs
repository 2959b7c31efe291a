//! Selection-probability models for the pooled cohorts.
//!
//! Each backend produces, for every selected internal row, the per-cohort
//! selection probabilities and their joint composition
//! `pi = 1 - prod_k (1 - pi_k)`. Backends:
//!
//! * pseudolikelihood — logistic selection models whose score replaces the
//!   unobserved population sum by the design-weighted external sum;
//! * membership ratio — a simplex mean regression of the external design
//!   probability combined with a multinomial model of sample membership on
//!   the union of the cohort and the external sample (requires overlap);
//! * poststratification — cell-based probabilities against known population
//!   cell frequencies;
//! * calibration — logistic selection models solved against known population
//!   totals of the selection variables;
//! * known — probabilities supplied by the caller.

use crate::data::{FitContext, KnownWeights};
use crate::error::{Error, Result};
use crate::solvers::multinomial::fit_multinomial;
use crate::solvers::simplex::fit_simplex;
use crate::solvers::{expit, newton_solve, NewtonConfig};
use ndarray::{Array1, Array2};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    PseudoLikelihood,
    MembershipRatio,
    PostStratification,
    Calibration,
    Known,
}

impl SelectionMethod {
    pub fn label(&self) -> &'static str {
        match self {
            SelectionMethod::PseudoLikelihood => "pseudolikelihood",
            SelectionMethod::MembershipRatio => "membership-ratio",
            SelectionMethod::PostStratification => "poststratification",
            SelectionMethod::Calibration => "calibration",
            SelectionMethod::Known => "known",
        }
    }
}

/// Fitted selection probabilities for all cohorts.
#[derive(Debug, Clone)]
pub struct SelectionModelFit {
    pub method: SelectionMethod,
    /// Logistic coefficients per cohort, when the backend has them.
    pub alpha: Vec<Option<Array1<f64>>>,
    /// n x K per-cohort probabilities on the selected internal rows. For the
    /// poststratification backend a zero entry means the cohort never samples
    /// that row's cell; composition handles this naturally.
    pub pi_internal: Array2<f64>,
    /// n_ext x K per-cohort probabilities on the external rows (logistic
    /// backends only; empty otherwise).
    pub pi_external: Array2<f64>,
    /// Joint probability on the selected internal rows, floored.
    pub pi_joint: Array1<f64>,
    /// Max-norm of each cohort's estimating-equation residual.
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
}

/// `pi = 1 - prod_k (1 - pi_k)` row-wise.
pub fn compose_joint(pi_k: &Array2<f64>) -> Array1<f64> {
    let n = pi_k.nrows();
    Array1::from_iter((0..n).map(|i| {
        let surv: f64 = (0..pi_k.ncols()).map(|k| 1.0 - pi_k[(i, k)]).product();
        1.0 - surv
    }))
}

fn floored(mut v: Array1<f64>, floor: f64) -> Array1<f64> {
    crate::data::clamp_probabilities(&mut v, floor);
    v
}

/// Joint pseudolikelihood: per cohort, solve
/// `(1/N) sum_{S_k=1} X_k = (1/N) sum_ext (1/pi_ext) expit(a'X_k) X_k`.
pub fn fit_pseudolikelihood(
    ctx: &FitContext,
    cfg: &NewtonConfig,
    floor: f64,
) -> Result<SelectionModelFit> {
    let n = ctx.n_internal();
    let n_ext = ctx.n_external();
    let big_n = ctx.n_population;
    let mut alpha = Vec::with_capacity(ctx.k);
    let mut residuals = Vec::with_capacity(ctx.k);
    let mut pi_internal = Array2::zeros((n, ctx.k));
    let mut pi_external = Array2::zeros((n_ext, ctx.k));
    let mut warnings = Vec::new();
    for k in 0..ctx.k {
        let x_int = &ctx.sel_design[k];
        let x_ext = &ctx.ext_sel_design[k];
        let q = x_int.ncols();
        // fixed part of the score: (1/N) sum over cohort members of X
        let mut member_sum: Array1<f64> = Array1::zeros(q);
        for i in 0..n {
            if ctx.s[(i, k)] > 0.5 {
                for j in 0..q {
                    member_sum[j] += x_int[(i, j)];
                }
            }
        }
        member_sum /= big_n;
        let score = |a: &Array1<f64>| {
            let mut g = member_sum.clone();
            for e in 0..n_ext {
                let eta: f64 = (0..q).map(|j| x_ext[(e, j)] * a[j]).sum();
                let w = expit(eta) / (ctx.ext_pi[e] * big_n);
                for j in 0..q {
                    g[j] -= w * x_ext[(e, j)];
                }
            }
            g
        };
        let jac = |a: &Array1<f64>| {
            let mut h: Array2<f64> = Array2::zeros((q, q));
            for e in 0..n_ext {
                let eta: f64 = (0..q).map(|j| x_ext[(e, j)] * a[j]).sum();
                let p = expit(eta);
                let w = -p * (1.0 - p) / (ctx.ext_pi[e] * big_n);
                for j in 0..q {
                    let base = w * x_ext[(e, j)];
                    for l in 0..q {
                        h[(j, l)] += base * x_ext[(e, l)];
                    }
                }
            }
            h
        };
        let res = newton_solve(
            Array1::zeros(q),
            score,
            jac,
            cfg,
            &format!("pseudolikelihood selection, cohort {}", k + 1),
        )?;
        if res.separation {
            warnings.push(format!("cohort {}: selection model shows signs of separation", k + 1));
        }
        for i in 0..n {
            let eta: f64 = (0..q).map(|j| x_int[(i, j)] * res.params[j]).sum();
            pi_internal[(i, k)] = expit(eta).clamp(floor, 1.0);
        }
        for e in 0..n_ext {
            let eta: f64 = (0..q).map(|j| x_ext[(e, j)] * res.params[j]).sum();
            pi_external[(e, k)] = expit(eta).clamp(floor, 1.0);
        }
        residuals.push(res.residual);
        alpha.push(Some(res.params));
    }
    let pi_joint = floored(compose_joint(&pi_internal), floor);
    Ok(SelectionModelFit {
        method: SelectionMethod::PseudoLikelihood,
        alpha,
        pi_internal,
        pi_external,
        pi_joint,
        residuals,
        warnings,
    })
}

/// Known population totals of each cohort's selection design (intercept
/// first), for the calibration backend.
#[derive(Debug, Clone)]
pub struct PopulationTotals {
    pub totals: Vec<Array1<f64>>,
}

/// Joint calibration: per cohort, solve
/// `sum_{S_k=1} X_k / expit(a'X_k) = population totals`.
pub fn fit_calibration(
    ctx: &FitContext,
    totals: &PopulationTotals,
    cfg: &NewtonConfig,
    floor: f64,
) -> Result<SelectionModelFit> {
    if totals.totals.len() != ctx.k {
        return Err(Error::Config(format!(
            "{} total vectors supplied for {} cohorts",
            totals.totals.len(),
            ctx.k
        )));
    }
    let n = ctx.n_internal();
    let mut alpha = Vec::with_capacity(ctx.k);
    let mut residuals = Vec::with_capacity(ctx.k);
    let mut pi_internal = Array2::zeros((n, ctx.k));
    let mut pi_external = Array2::zeros((ctx.n_external(), ctx.k));
    let mut warnings = Vec::new();
    for k in 0..ctx.k {
        let x_int = &ctx.sel_design[k];
        let q = x_int.ncols();
        let t = &totals.totals[k];
        if t.len() != q {
            return Err(Error::Config(format!(
                "cohort {}: {} totals supplied for {} design columns",
                k + 1,
                t.len(),
                q
            )));
        }
        let members = ctx.cohort_rows(k);
        // Weights are at least 1, so the calibrated count can never fall below
        // the cohort size; totals below it are infeasible outright.
        if t[0] < members.len() as f64 {
            return Err(Error::InfeasibleCalibration { cohort: k + 1 });
        }
        let scale = 1.0 + t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let score = |a: &Array1<f64>| {
            let mut g = -t.clone();
            for &i in &members {
                let eta: f64 = (0..q).map(|j| x_int[(i, j)] * a[j]).sum();
                let w = 1.0 / expit(eta);
                for j in 0..q {
                    g[j] += w * x_int[(i, j)];
                }
            }
            g / scale
        };
        let jac = |a: &Array1<f64>| {
            let mut h: Array2<f64> = Array2::zeros((q, q));
            for &i in &members {
                let eta: f64 = (0..q).map(|j| x_int[(i, j)] * a[j]).sum();
                let p = expit(eta);
                let w = -(1.0 - p) / p;
                for j in 0..q {
                    let base = w * x_int[(i, j)];
                    for l in 0..q {
                        h[(j, l)] += base * x_int[(i, l)];
                    }
                }
            }
            h / scale
        };
        let res = newton_solve(
            Array1::zeros(q),
            score,
            jac,
            cfg,
            &format!("calibration selection, cohort {}", k + 1),
        )
        .map_err(|e| match e {
            Error::NoConvergence { .. } => Error::InfeasibleCalibration { cohort: k + 1 },
            other => other,
        })?;
        if res.separation {
            warnings.push(format!("cohort {}: calibration weights are extreme", k + 1));
        }
        for i in 0..n {
            let eta: f64 = (0..q).map(|j| x_int[(i, j)] * res.params[j]).sum();
            pi_internal[(i, k)] = expit(eta).clamp(floor, 1.0);
        }
        let x_ext = &ctx.ext_sel_design[k];
        for e in 0..ctx.n_external() {
            let eta: f64 = (0..q).map(|j| x_ext[(e, j)] * res.params[j]).sum();
            pi_external[(e, k)] = expit(eta).clamp(floor, 1.0);
        }
        residuals.push(res.residual * scale);
        alpha.push(Some(res.params));
    }
    let pi_joint = floored(compose_joint(&pi_internal), floor);
    Ok(SelectionModelFit {
        method: SelectionMethod::Calibration,
        alpha,
        pi_internal,
        pi_external,
        pi_joint,
        residuals,
        warnings,
    })
}

/// Membership ratio: per cohort,
/// `pi_k(x) = P(ext | x) * (p11 + p10) / (p11 + p01)`, where `P(ext | x)` is a
/// simplex mean regression of the external design probability and the `p`'s
/// come from a multinomial model of joint membership (both, cohort only,
/// external only) on the union sample. Requires shared individuals.
pub fn fit_membership_ratio(
    ctx: &FitContext,
    cfg: &NewtonConfig,
    floor: f64,
) -> Result<SelectionModelFit> {
    let n = ctx.n_internal();
    let n_ext = ctx.n_external();
    let mut pi_internal = Array2::zeros((n, ctx.k));
    let mut residuals = Vec::with_capacity(ctx.k);
    let mut warnings = Vec::new();
    // external row -> internal row for shared ids
    let mut ext_to_int: HashMap<usize, usize> = HashMap::new();
    for &(i, e) in &ctx.overlap {
        ext_to_int.insert(e, i);
    }
    for k in 0..ctx.k {
        let x_int = &ctx.sel_design[k];
        let x_ext = &ctx.ext_sel_design[k];
        let q = x_int.ncols();
        // 1. external-probability regression on the external sample
        let simplex = fit_simplex(
            x_ext,
            &ctx.ext_pi,
            cfg,
            &format!("membership-ratio external regression, cohort {}", k + 1),
        )?;
        // 2. union sample with three membership categories
        let member_has_ext: Vec<bool> = {
            let mut flags = vec![false; n];
            for &(i, _) in &ctx.overlap {
                flags[i] = true;
            }
            flags
        };
        let mut rows: Vec<f64> = Vec::new();
        let mut cats: Vec<usize> = Vec::new();
        let mut n_both = 0usize;
        for i in 0..n {
            if ctx.s[(i, k)] < 0.5 {
                continue;
            }
            let cat = if member_has_ext[i] {
                n_both += 1;
                0 // in cohort and external sample
            } else {
                1 // cohort only
            };
            for j in 0..q {
                rows.push(x_int[(i, j)]);
            }
            cats.push(cat);
        }
        for e in 0..n_ext {
            // skip rows already represented through the cohort overlap
            match ext_to_int.get(&e) {
                Some(&i) if ctx.s[(i, k)] > 0.5 => continue,
                _ => {}
            }
            for j in 0..q {
                rows.push(x_ext[(e, j)]);
            }
            cats.push(2); // external only
        }
        if n_both == 0 {
            return Err(Error::OverlapCategoryEmpty { cohort: k + 1 });
        }
        let union_x = Array2::from_shape_vec((cats.len(), q), rows).unwrap();
        let mfit = fit_multinomial(
            &union_x,
            &cats,
            3,
            2,
            cfg,
            &format!("membership-ratio multinomial, cohort {}", k + 1),
        )?;
        // 3. assemble pi_k on every selected row
        let mut row = vec![0.0; q];
        for i in 0..n {
            for j in 0..q {
                row[j] = x_int[(i, j)];
            }
            let p_ext = simplex.predict_row(&row);
            let p = mfit.predict_row(&row);
            let ratio = (p[0] + p[1]) / (p[0] + p[2]).max(1e-12);
            pi_internal[(i, k)] = (p_ext * ratio).clamp(floor, 1.0);
        }
        residuals.push(0.0);
        if !simplex.converged {
            warnings.push(format!("cohort {}: external regression did not fully converge", k + 1));
        }
    }
    let pi_joint = floored(compose_joint(&pi_internal), floor);
    Ok(SelectionModelFit {
        method: SelectionMethod::MembershipRatio,
        alpha: vec![None; ctx.k],
        pi_internal,
        pi_external: Array2::zeros((0, 0)),
        pi_joint,
        residuals,
        warnings,
    })
}

/// One stratification variable: a term evaluated on the internal rows and cut
/// into `cuts.len() + 1` ordered bins (value <= cut goes into the lower bin).
#[derive(Debug, Clone)]
pub struct StrataVariable {
    pub term: String,
    pub cuts: Vec<f64>,
}

impl StrataVariable {
    pub fn code(&self, value: f64) -> u8 {
        self.cuts.partition_point(|&c| value > c) as u8
    }
}

/// Population cell probabilities, either the exact joint distribution or a
/// product approximation through one anchor variable:
/// `P(cell) = P(anchor) * prod_v P(v | anchor)`.
#[derive(Debug, Clone)]
pub enum CellProbabilities {
    Exact(HashMap<Vec<u8>, f64>),
    MarginalProduct {
        /// index into `StrataSpec::variables`
        anchor: usize,
        anchor_probs: Vec<f64>,
        /// `conditionals[v][anchor_code][var_code]` for each non-anchor
        /// variable, in `variables` order with the anchor skipped.
        conditionals: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone)]
pub struct StrataSpec {
    pub variables: Vec<StrataVariable>,
    pub probs: CellProbabilities,
}

impl StrataSpec {
    pub fn cell_probability(&self, cell: &[u8]) -> f64 {
        match &self.probs {
            CellProbabilities::Exact(map) => map.get(cell).copied().unwrap_or(0.0),
            CellProbabilities::MarginalProduct { anchor, anchor_probs, conditionals } => {
                let a = cell[*anchor] as usize;
                if a >= anchor_probs.len() {
                    return 0.0;
                }
                let mut p = anchor_probs[a];
                let mut c_idx = 0;
                for (v, &code) in cell.iter().enumerate() {
                    if v == *anchor {
                        continue;
                    }
                    let table = &conditionals[c_idx];
                    c_idx += 1;
                    if a >= table.len() || code as usize >= table[a].len() {
                        return 0.0;
                    }
                    p *= table[a][code as usize];
                }
                p
            }
        }
    }
}

/// Joint poststratification: per cohort,
/// `pi_k(cell) = P(cell | S_k = 1) * (n_k / N) / P(cell)`, with the population
/// cell probabilities supplied in `specs`.
pub fn fit_poststratification(
    ctx: &FitContext,
    specs: &[StrataSpec],
    floor: f64,
) -> Result<SelectionModelFit> {
    if specs.len() != ctx.k {
        return Err(Error::Config(format!(
            "{} stratification specs supplied for {} cohorts",
            specs.len(),
            ctx.k
        )));
    }
    let n = ctx.n_internal();
    let big_n = ctx.n_population;
    let mut pi_internal = Array2::zeros((n, ctx.k));
    for (k, spec) in specs.iter().enumerate() {
        // evaluate and discretize the stratification variables
        let values: Vec<Array1<f64>> = spec
            .variables
            .iter()
            .map(|v| ctx.term_values(&v.term))
            .collect::<Result<Vec<_>>>()?;
        let cells: Vec<Vec<u8>> = (0..n)
            .map(|i| {
                spec.variables
                    .iter()
                    .enumerate()
                    .map(|(v, var)| var.code(values[v][i]))
                    .collect()
            })
            .collect();
        let mut member_counts: HashMap<&[u8], f64> = HashMap::new();
        for i in 0..n {
            if ctx.s[(i, k)] > 0.5 {
                *member_counts.entry(cells[i].as_slice()).or_insert(0.0) += 1.0;
            }
        }
        for i in 0..n {
            let m = member_counts.get(cells[i].as_slice()).copied().unwrap_or(0.0);
            if m == 0.0 {
                // the cohort never samples this cell; contributes nothing to
                // the joint composition
                pi_internal[(i, k)] = 0.0;
                continue;
            }
            let p_cell = spec.cell_probability(&cells[i]);
            if p_cell <= 0.0 {
                return Err(Error::EmptyCell { cohort: k + 1 });
            }
            // (m / n_k) * (n_k / N) / P(cell) = m / (N * P(cell))
            pi_internal[(i, k)] = (m / (big_n * p_cell)).min(1.0);
        }
    }
    let pi_joint = floored(compose_joint(&pi_internal), floor);
    Ok(SelectionModelFit {
        method: SelectionMethod::PostStratification,
        alpha: vec![None; ctx.k],
        pi_internal,
        pi_external: Array2::zeros((0, 0)),
        pi_joint,
        residuals: vec![0.0; ctx.k],
        warnings: Vec::new(),
    })
}

/// Known probabilities supplied per id.
pub fn fit_known(ctx: &FitContext, weights: &KnownWeights, floor: f64) -> Result<SelectionModelFit> {
    if weights.pi_k.ncols() != ctx.k {
        return Err(Error::Config(format!(
            "weights file has {} cohorts, data has {}",
            weights.pi_k.ncols(),
            ctx.k
        )));
    }
    let index: HashMap<i64, usize> =
        weights.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let n = ctx.n_internal();
    let mut pi_internal = Array2::zeros((n, ctx.k));
    let mut pi_joint = Array1::zeros(n);
    for i in 0..n {
        let r = *index.get(&ctx.ids[i]).ok_or(Error::IncompleteWeights)?;
        for k in 0..ctx.k {
            pi_internal[(i, k)] = weights.pi_k[(r, k)];
        }
        pi_joint[i] = weights.pi_joint[r];
    }
    Ok(SelectionModelFit {
        method: SelectionMethod::Known,
        alpha: vec![None; ctx.k],
        pi_internal,
        pi_external: Array2::zeros((0, 0)),
        pi_joint: floored(pi_joint, floor),
        residuals: vec![0.0; ctx.k],
        warnings: Vec::new(),
    })
}
