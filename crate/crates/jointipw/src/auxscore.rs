//! Auxiliary score models for the augmented (doubly robust) estimator.
//!
//! The augmented estimating equation replaces the score contribution of a
//! selected individual by `U_i - f(X_i)` and adds back `f(X_e)` over the
//! external sample, where `f` approximates `E[U | X]` and `X` contains the
//! outcome (optionally), the non-shared disease covariates, and the
//! selection variables — everything observed in both samples.
//!
//! Two constructions are provided:
//! * flexible — the score components are regressed on `X` with a seeded
//!   gradient-boosted learner; by linearity of the score in `(D, D Z, expit
//!   terms)` only two conditional means per shared auxiliary variable are
//!   needed;
//! * parametric — a homoscedastic normal linear model for the shared
//!   auxiliary variable given `X`, integrated against the score by Monte
//!   Carlo with common random draws.

use crate::data::FitContext;
use crate::error::{Error, Result};
use crate::solvers::expit;
use crate::solvers::gbrt::{BinnedFeatures, GbrtConfig, GbrtTrainer, RegressorModel};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::OnceLock;

/// Evaluated auxiliary scores: one p-vector per internal and external row.
#[derive(Debug, Clone)]
pub struct AuxValues {
    pub internal: Array2<f64>,
    pub external: Array2<f64>,
}

impl AuxValues {
    /// Identically-zero auxiliary scores, which reduce the augmented
    /// estimating equation to plain inverse-probability weighting.
    pub fn zeros(ctx: &FitContext) -> AuxValues {
        let p = ctx.disease_design.ncols();
        AuxValues {
            internal: Array2::zeros((ctx.n_internal(), p)),
            external: Array2::zeros((ctx.n_external(), p)),
        }
    }
}

/// Builds auxiliary score values at a given disease-model coefficient vector.
/// `training_rows` of `None` trains on all selected rows; the no-overlap
/// variant passes each cohort's rows. Implementations must be deterministic.
pub trait AuxScoreBuilder: Sync {
    fn build(
        &self,
        ctx: &FitContext,
        theta: &Array1<f64>,
        training_rows: Option<&[usize]>,
    ) -> Result<AuxValues>;
}

/// The zero model: always returns `f = 0`.
pub struct ZeroAux;

impl AuxScoreBuilder for ZeroAux {
    fn build(
        &self,
        ctx: &FitContext,
        _theta: &Array1<f64>,
        _training_rows: Option<&[usize]>,
    ) -> Result<AuxValues> {
        Ok(AuxValues::zeros(ctx))
    }
}

fn validate_aux(ctx: &FitContext) -> Result<()> {
    if ctx.n_aux_shared == 0 {
        return Err(Error::EmptyAuxiliary);
    }
    if ctx.aux_features.ncols() == 0 {
        return Err(Error::Config(
            "auxiliary score model needs at least one feature".into(),
        ));
    }
    let n_zminus = ctx.disease_design.ncols() - 1 - ctx.n_aux_shared;
    if n_zminus > 0 && ctx.ext_zminus.ncols() != n_zminus {
        return Err(Error::Config(
            "external sample lacks the non-shared disease covariates needed by the augmented estimator"
                .into(),
        ));
    }
    Ok(())
}

/// Flexible auxiliary model backed by gradient-boosted trees.
///
/// The auxiliary score vector is assembled from two families of conditional
/// means of score components given the features:
/// `f2 = E[D - expit(theta'Z) | X]` fills the intercept slot,
/// `f1_j = E[Z1_j (D - expit(theta'Z)) | X]` fill the shared-auxiliary
/// slots, and `f2 * Z-1` fills the non-shared slots (those covariates are in
/// `X`, so they factor out of the conditional mean). Each conditional mean is
/// fitted by a seeded gradient-boosted regressor on the selected rows.
pub struct FlexibleAux {
    pub trainer: GbrtTrainer,
    pub seed: u64,
    binned: OnceLock<BinnedFeatures>,
}

impl FlexibleAux {
    pub fn new(config: GbrtConfig, seed: u64) -> FlexibleAux {
        FlexibleAux { trainer: GbrtTrainer::new(config), seed, binned: OnceLock::new() }
    }
}

impl AuxScoreBuilder for FlexibleAux {
    fn build(
        &self,
        ctx: &FitContext,
        theta: &Array1<f64>,
        training_rows: Option<&[usize]>,
    ) -> Result<AuxValues> {
        validate_aux(ctx)?;
        let n = ctx.n_internal();
        let n_ext = ctx.n_external();
        let p = ctx.disease_design.ncols();
        let q1 = ctx.n_aux_shared;
        let rows: Vec<usize> = match training_rows {
            Some(r) => r.to_vec(),
            None => (0..n).collect(),
        };
        if rows.is_empty() {
            return Err(Error::TooFewRows { rows: 0, required: 1 });
        }
        // Regression targets at theta: t2_i = D_i - expit(theta' z_i),
        // t1_ij = t2_i * Z1_ij — the score components themselves, so the
        // fitted conditional means estimate E[U | X] directly.
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| ctx.disease_design[(i, j)] * theta[j]).sum();
            resid[i] = ctx.outcome[i] - expit(eta);
        }
        // Training matrices restricted to `rows`.
        let nf = ctx.aux_features.ncols();
        let mut train_x = Array2::zeros((rows.len(), nf));
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..nf {
                train_x[(r, j)] = ctx.aux_features[(i, j)];
            }
        }
        // Bin once per (builder, full-sample training design); subset training
        // bins its own design.
        let owned_binned;
        let binned: &BinnedFeatures = if training_rows.is_none() {
            self.binned.get_or_init(|| BinnedFeatures::new(&train_x, self.trainer.config.max_bins))
        } else {
            owned_binned = BinnedFeatures::new(&train_x, self.trainer.config.max_bins);
            &owned_binned
        };
        // f2 target: residual; f1_j target: residual * Z1_j.
        let t2 = Array1::from_iter(rows.iter().map(|&i| resid[i]));
        let model2 = self.trainer.fit_binned(binned, &t2, self.seed);
        let mut models1: Vec<crate::solvers::gbrt::GbrtModel> = Vec::with_capacity(q1);
        for j in 0..q1 {
            let t1 = Array1::from_iter(
                rows.iter().map(|&i| resid[i] * ctx.disease_design[(i, 1 + j)]),
            );
            models1.push(self.trainer.fit_binned(binned, &t1, self.seed.wrapping_add(1 + j as u64)));
        }
        // Predict on all internal and external rows.
        let f2_int = model2.predict(&ctx.aux_features);
        let f2_ext = model2.predict(&ctx.ext_aux_features);
        let f1_int: Vec<Array1<f64>> =
            models1.iter().map(|m| m.predict(&ctx.aux_features)).collect();
        let f1_ext: Vec<Array1<f64>> =
            models1.iter().map(|m| m.predict(&ctx.ext_aux_features)).collect();

        let zminus_cols = ctx.zminus_design_cols();
        let mut internal = Array2::zeros((n, p));
        for i in 0..n {
            internal[(i, 0)] = f2_int[i];
            for j in 0..q1 {
                internal[(i, 1 + j)] = f1_int[j][i];
            }
            for (slot, &col) in zminus_cols.iter().enumerate() {
                internal[(i, 1 + q1 + slot)] = f2_int[i] * ctx.disease_design[(i, col)];
            }
        }
        let mut external = Array2::zeros((n_ext, p));
        for e in 0..n_ext {
            external[(e, 0)] = f2_ext[e];
            for j in 0..q1 {
                external[(e, 1 + j)] = f1_ext[j][e];
            }
            for slot in 0..zminus_cols.len() {
                external[(e, 1 + q1 + slot)] = f2_ext[e] * ctx.ext_zminus[(e, slot)];
            }
        }
        Ok(AuxValues { internal, external })
    }
}

/// Parametric auxiliary model: the single shared auxiliary variable given the
/// features is modeled as a homoscedastic normal linear regression, and
/// `f(X) = E[U(Z1, theta) | X]` is computed by Monte Carlo integration with
/// `m_draws` common standard-normal draws.
pub struct ParametricAux {
    pub m_draws: usize,
    pub seed: u64,
    draws: Vec<f64>,
}

impl ParametricAux {
    pub fn new(m_draws: usize, seed: u64) -> ParametricAux {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..m_draws).map(|_| StandardNormal.sample(&mut rng)).collect();
        ParametricAux { m_draws, seed, draws }
    }
}

impl AuxScoreBuilder for ParametricAux {
    fn build(
        &self,
        ctx: &FitContext,
        theta: &Array1<f64>,
        training_rows: Option<&[usize]>,
    ) -> Result<AuxValues> {
        validate_aux(ctx)?;
        if ctx.n_aux_shared != 1 {
            return Err(Error::Config(
                "the parametric auxiliary model supports exactly one shared auxiliary variable"
                    .into(),
            ));
        }
        let d_feature = ctx
            .aux_feature_names
            .iter()
            .position(|f| f == crate::data::OUTCOME_NAME)
            .ok_or_else(|| {
                Error::Config(
                    "the parametric auxiliary model requires the outcome among the auxiliary features"
                        .into(),
                )
            })?;
        let n = ctx.n_internal();
        let n_ext = ctx.n_external();
        let p = ctx.disease_design.ncols();
        let nf = ctx.aux_features.ncols();
        let rows: Vec<usize> = match training_rows {
            Some(r) => r.to_vec(),
            None => (0..n).collect(),
        };
        if rows.len() < nf + 2 {
            return Err(Error::TooFewRows { rows: rows.len(), required: nf + 2 });
        }
        // OLS of Z1 on (1, features) over the training rows; sigma^2 by MLE.
        let q = nf + 1;
        let mut xtx: Array2<f64> = Array2::zeros((q, q));
        let mut xty: Array1<f64> = Array1::zeros(q);
        let design_row = |i: usize, buf: &mut Vec<f64>| {
            buf.clear();
            buf.push(1.0);
            for j in 0..nf {
                buf.push(ctx.aux_features[(i, j)]);
            }
        };
        let mut buf = Vec::with_capacity(q);
        for &i in &rows {
            design_row(i, &mut buf);
            let z1 = ctx.disease_design[(i, 1)];
            for a in 0..q {
                xty[a] += buf[a] * z1;
                for b in 0..q {
                    xtx[(a, b)] += buf[a] * buf[b];
                }
            }
        }
        let gamma = crate::linalg::solve_checked(&xtx, &xty, 1e12)
            .ok_or_else(|| Error::RankDeficient { context: "parametric auxiliary regression".into() })?;
        let mut rss = 0.0;
        for &i in &rows {
            design_row(i, &mut buf);
            let fitted: f64 = (0..q).map(|a| gamma[a] * buf[a]).sum();
            let r = ctx.disease_design[(i, 1)] - fitted;
            rss += r * r;
        }
        let sigma = (rss / rows.len() as f64).sqrt();

        let zminus_cols = ctx.zminus_design_cols();
        // Integrated score at a feature row: average of U over z1 draws.
        let eval = |d: f64, mu: f64, zminus: &[f64]| -> Vec<f64> {
            let mut f = vec![0.0; p];
            for &eps in &self.draws {
                let z1 = mu + sigma * eps;
                let mut eta = theta[0] + theta[1] * z1;
                for (slot, &zm) in zminus.iter().enumerate() {
                    eta += theta[2 + slot] * zm;
                }
                let r = d - expit(eta);
                f[0] += r;
                f[1] += r * z1;
                for (slot, &zm) in zminus.iter().enumerate() {
                    f[2 + slot] += r * zm;
                }
            }
            for v in f.iter_mut() {
                *v /= self.m_draws as f64;
            }
            f
        };

        let mut internal = Array2::zeros((n, p));
        let mut zminus = vec![0.0; zminus_cols.len()];
        for i in 0..n {
            design_row(i, &mut buf);
            let mu: f64 = (0..q).map(|a| gamma[a] * buf[a]).sum();
            for (slot, &col) in zminus_cols.iter().enumerate() {
                zminus[slot] = ctx.disease_design[(i, col)];
            }
            let f = eval(ctx.aux_features[(i, d_feature)], mu, &zminus);
            for j in 0..p {
                internal[(i, j)] = f[j];
            }
        }
        let mut external = Array2::zeros((n_ext, p));
        for e in 0..n_ext {
            buf.clear();
            buf.push(1.0);
            for j in 0..nf {
                buf.push(ctx.ext_aux_features[(e, j)]);
            }
            let mu: f64 = (0..q).map(|a| gamma[a] * buf[a]).sum();
            for slot in 0..zminus_cols.len() {
                zminus[slot] = ctx.ext_zminus[(e, slot)];
            }
            let f = eval(ctx.ext_aux_features[(e, d_feature)], mu, &zminus);
            for j in 0..p {
                external[(e, j)] = f[j];
            }
        }
        Ok(AuxValues { internal, external })
    }
}
