//! Data containers, CSV readers, variable-role validation, and the fit
//! context that materializes per-cohort design matrices.
//!
//! Binding is by column name throughout. Selection-model terms may be plain
//! column names, the outcome name `D`, or products written `a*b` (each factor
//! again a column or `D`); an intercept is always prepended.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::collections::HashMap;
use std::path::Path;

pub const OUTCOME_NAME: &str = "D";

/// Pooled internal (non-probability) sample: one row per selected individual,
/// with the outcome, covariates, and per-cohort membership indicators.
#[derive(Debug, Clone)]
pub struct CombinedSample {
    pub ids: Vec<i64>,
    pub outcome: Array1<f64>,
    pub covariate_names: Vec<String>,
    pub covariates: Array2<f64>,
    /// n x K membership indicators (0/1); a row may belong to several cohorts.
    pub membership: Array2<f64>,
}

impl CombinedSample {
    pub fn n_cohorts(&self) -> usize {
        self.membership.ncols()
    }

    /// Row-wise composite selection indicator: max over cohorts.
    pub fn composite(&self) -> Array1<f64> {
        let n = self.membership.nrows();
        Array1::from_iter((0..n).map(|i| {
            (0..self.membership.ncols())
                .map(|k| self.membership[(i, k)])
                .fold(0.0f64, f64::max)
        }))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }
}

/// External probability sample with known inclusion probabilities.
#[derive(Debug, Clone)]
pub struct ExternalSample {
    pub ids: Vec<i64>,
    pub covariate_names: Vec<String>,
    pub covariates: Array2<f64>,
    pub pi_ext: Array1<f64>,
}

impl ExternalSample {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }
}

/// Which variable plays which role in the models.
#[derive(Debug, Clone)]
pub struct VariableRoles {
    /// Disease-model covariates Z (order defines the coefficient order after
    /// the intercept, with the shared auxiliary block first).
    pub disease: Vec<String>,
    /// Shared auxiliary variables (subset of `disease`) observed in every
    /// cohort but possibly absent from the external sample.
    pub aux_shared: Vec<String>,
    /// Per-cohort selection-model terms (intercept implied).
    pub selection: Vec<Vec<String>>,
    /// Feature set X for the auxiliary score model; may include `D`.
    pub aux_features: Vec<String>,
}

/// One multiplicative term of a design: product of factors, each either the
/// outcome or a covariate column.
#[derive(Debug, Clone)]
pub struct Term {
    pub label: String,
    pub factors: Vec<String>,
}

pub fn parse_term(label: &str) -> Term {
    Term {
        label: label.to_string(),
        factors: label.split('*').map(|s| s.trim().to_string()).collect(),
    }
}

fn parse_value(raw: &str, dataset: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("na") || trimmed.eq_ignore_ascii_case("nan")
    {
        return Err(Error::MissingValue {
            dataset: dataset.to_string(),
            row,
            column: column.to_string(),
        });
    }
    let v: f64 = trimmed.parse().map_err(|_| Error::MissingValue {
        dataset: dataset.to_string(),
        row,
        column: column.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::MissingValue {
            dataset: dataset.to_string(),
            row,
            column: column.to_string(),
        });
    }
    Ok(v)
}

fn is_indicator_column(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next() == Some('S') && name.len() > 1 && chars.all(|c| c.is_ascii_digit())
}

/// Reads the internal pooled sample. Expected header:
/// `id, D, <covariates...>, S1..SK` (indicator columns are those named `S<j>`;
/// they must form a contiguous numbering from 1).
pub fn read_internal_csv(path: &Path) -> Result<CombinedSample> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { path: path_str.clone(), source: e })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv { path: path_str.clone(), source: e })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let id_idx = headers.iter().position(|h| h == "id").ok_or_else(|| Error::MissingColumn {
        dataset: "internal".into(),
        column: "id".into(),
    })?;
    let d_idx = headers.iter().position(|h| h == OUTCOME_NAME).ok_or_else(|| {
        Error::MissingColumn { dataset: "internal".into(), column: OUTCOME_NAME.into() }
    })?;
    let mut indicator_cols: Vec<(usize, usize)> = Vec::new(); // (cohort number, column)
    let mut covariate_cols: Vec<usize> = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        if j == id_idx || j == d_idx {
            continue;
        }
        if is_indicator_column(h) {
            let num: usize = h[1..].parse().unwrap();
            indicator_cols.push((num, j));
        } else {
            covariate_cols.push(j);
        }
    }
    indicator_cols.sort();
    let k = indicator_cols.len();
    if k == 0 {
        return Err(Error::MissingColumn { dataset: "internal".into(), column: "S1".into() });
    }
    for (want, (num, _)) in indicator_cols.iter().enumerate() {
        if *num != want + 1 {
            return Err(Error::MissingColumn {
                dataset: "internal".into(),
                column: format!("S{}", want + 1),
            });
        }
    }
    let covariate_names: Vec<String> =
        covariate_cols.iter().map(|&j| headers[j].clone()).collect();

    let mut ids = Vec::new();
    let mut outcome = Vec::new();
    let mut cov = Vec::new();
    let mut mem = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv { path: path_str.clone(), source: e })?;
        let id = parse_value(&record[id_idx], "internal", row_idx, "id")? as i64;
        let d = parse_value(&record[d_idx], "internal", row_idx, OUTCOME_NAME)?;
        if d != 0.0 && d != 1.0 {
            return Err(Error::InvalidOutcome { row: row_idx, value: d });
        }
        ids.push(id);
        outcome.push(d);
        for &j in &covariate_cols {
            cov.push(parse_value(&record[j], "internal", row_idx, &headers[j])?);
        }
        for &(num, j) in &indicator_cols {
            let s = parse_value(&record[j], "internal", row_idx, &headers[j])?;
            if s != 0.0 && s != 1.0 {
                return Err(Error::MissingValue {
                    dataset: "internal".into(),
                    row: row_idx,
                    column: format!("S{num}"),
                });
            }
            mem.push(s);
        }
    }
    let n = ids.len();
    Ok(CombinedSample {
        ids,
        outcome: Array1::from(outcome),
        covariates: Array2::from_shape_vec((n, covariate_names.len()), cov).unwrap(),
        covariate_names,
        membership: Array2::from_shape_vec((n, k), mem).unwrap(),
    })
}

/// Reads the external probability sample. Expected header:
/// `id, <covariates...>, pi_ext` with `pi_ext` in (0, 1].
pub fn read_external_csv(path: &Path) -> Result<ExternalSample> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { path: path_str.clone(), source: e })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv { path: path_str.clone(), source: e })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let id_idx = headers.iter().position(|h| h == "id").ok_or_else(|| Error::MissingColumn {
        dataset: "external".into(),
        column: "id".into(),
    })?;
    let pi_idx = headers.iter().position(|h| h == "pi_ext").ok_or_else(|| {
        Error::MissingColumn { dataset: "external".into(), column: "pi_ext".into() }
    })?;
    let covariate_cols: Vec<usize> =
        (0..headers.len()).filter(|&j| j != id_idx && j != pi_idx).collect();
    let covariate_names: Vec<String> =
        covariate_cols.iter().map(|&j| headers[j].clone()).collect();

    let mut ids = Vec::new();
    let mut cov = Vec::new();
    let mut pi = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv { path: path_str.clone(), source: e })?;
        ids.push(parse_value(&record[id_idx], "external", row_idx, "id")? as i64);
        for &j in &covariate_cols {
            cov.push(parse_value(&record[j], "external", row_idx, &headers[j])?);
        }
        let p = parse_value(&record[pi_idx], "external", row_idx, "pi_ext")?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::MissingValue {
                dataset: "external".into(),
                row: row_idx,
                column: "pi_ext".into(),
            });
        }
        pi.push(p);
    }
    let n = ids.len();
    Ok(ExternalSample {
        ids,
        covariates: Array2::from_shape_vec((n, covariate_names.len()), cov).unwrap(),
        covariate_names,
        pi_ext: Array1::from(pi),
    })
}

/// Known per-cohort and joint selection probabilities keyed by `id`.
#[derive(Debug, Clone)]
pub struct KnownWeights {
    pub ids: Vec<i64>,
    pub pi_k: Array2<f64>,
    pub pi_joint: Array1<f64>,
}

/// Reads a known-weights file with header `id, pi_1..pi_K, pi_joint`.
pub fn read_weights_csv(path: &Path, k: usize) -> Result<KnownWeights> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { path: path_str.clone(), source: e })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv { path: path_str.clone(), source: e })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            dataset: "weights".into(),
            column: name.into(),
        })
    };
    let id_idx = col("id")?;
    let joint_idx = col("pi_joint")?;
    let k_idx: Vec<usize> =
        (1..=k).map(|j| col(&format!("pi_{j}"))).collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut pik = Vec::new();
    let mut joint = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv { path: path_str.clone(), source: e })?;
        ids.push(parse_value(&record[id_idx], "weights", row_idx, "id")? as i64);
        for (j, &cidx) in k_idx.iter().enumerate() {
            let p = parse_value(&record[cidx], "weights", row_idx, &format!("pi_{}", j + 1))?;
            pik.push(p);
        }
        joint.push(parse_value(&record[joint_idx], "weights", row_idx, "pi_joint")?);
    }
    let n = ids.len();
    Ok(KnownWeights {
        ids,
        pi_k: Array2::from_shape_vec((n, k), pik).unwrap(),
        pi_joint: Array1::from(joint),
    })
}

/// Clamps probabilities into `[floor, 1]`. Requires `floor` in (0, 0.5); the
/// upper end of that range already implies enormous weights, so anything
/// larger is a configuration mistake.
pub fn clamp_probabilities(pi: &mut Array1<f64>, floor: f64) {
    assert!(floor > 0.0 && floor < 0.5, "probability floor must lie in (0, 0.5)");
    for v in pi.iter_mut() {
        *v = v.clamp(floor, 1.0);
    }
}

/// Everything the estimators need, with designs resolved to matrices:
/// the selected internal rows, the external rows, their overlap, and the
/// disease/selection/auxiliary designs.
#[derive(Debug, Clone)]
pub struct FitContext {
    pub n_population: f64,
    pub k: usize,
    pub ids: Vec<i64>,
    pub outcome: Array1<f64>,
    /// Raw covariates of the selected rows, for models that bin or stratify on
    /// arbitrary terms.
    pub covariate_names: Vec<String>,
    pub covariates: Array2<f64>,
    /// n x K membership indicators over the selected rows.
    pub s: Array2<f64>,
    /// Disease-model design: intercept, shared auxiliary block, remaining Z.
    pub disease_design: Array2<f64>,
    pub disease_terms: Vec<String>,
    /// Number of shared auxiliary columns; they occupy design columns
    /// `1..=n_aux_shared`.
    pub n_aux_shared: usize,
    /// Per-cohort selection designs on the internal rows (intercept included).
    pub sel_design: Vec<Array2<f64>>,
    pub sel_terms: Vec<Vec<String>>,
    /// Per-cohort selection designs on the external rows.
    pub ext_sel_design: Vec<Array2<f64>>,
    pub ext_ids: Vec<i64>,
    pub ext_pi: Array1<f64>,
    /// Pairs (internal row, external row) sharing an id.
    pub overlap: Vec<(usize, usize)>,
    /// Auxiliary score features X on internal / external rows (no intercept).
    pub aux_features: Array2<f64>,
    pub ext_aux_features: Array2<f64>,
    pub aux_feature_names: Vec<String>,
    /// External values of the non-shared disease covariates, in the same order
    /// as disease design columns `n_aux_shared+1..`.
    pub ext_zminus: Array2<f64>,
    pub warnings: Vec<String>,
}

fn term_column(
    term: &Term,
    dataset: &str,
    names: &[String],
    covariates: &Array2<f64>,
    outcome: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let n = covariates.nrows();
    let mut col = Array1::ones(n);
    for factor in &term.factors {
        if factor == OUTCOME_NAME {
            match outcome {
                Some(d) => {
                    for i in 0..n {
                        col[i] *= d[i];
                    }
                    continue;
                }
                None => {}
            }
        }
        let idx = names.iter().position(|c| c == factor).ok_or_else(|| Error::MissingColumn {
            dataset: dataset.to_string(),
            column: factor.clone(),
        })?;
        for i in 0..n {
            col[i] *= covariates[(i, idx)];
        }
    }
    Ok(col)
}

fn design_from_terms(
    terms: &[Term],
    dataset: &str,
    names: &[String],
    covariates: &Array2<f64>,
    outcome: Option<&Array1<f64>>,
) -> Result<Array2<f64>> {
    let n = covariates.nrows();
    let q = terms.len() + 1;
    let mut design = Array2::ones((n, q));
    for (j, term) in terms.iter().enumerate() {
        let col = term_column(term, dataset, names, covariates, outcome)?;
        for i in 0..n {
            design[(i, j + 1)] = col[i];
        }
    }
    Ok(design)
}

impl VariableRoles {
    /// Checks internal consistency of the roles: the shared auxiliary block is
    /// part of the disease model, never appears in any selection model, and is
    /// distinct from the auxiliary feature set.
    pub fn validate(&self) -> Result<()> {
        for a in &self.aux_shared {
            if !self.disease.iter().any(|d| d == a) {
                return Err(Error::Config(format!(
                    "shared auxiliary variable `{a}` is not a disease-model covariate"
                )));
            }
            for (k, terms) in self.selection.iter().enumerate() {
                for t in terms {
                    if parse_term(t).factors.iter().any(|f| f == a) {
                        return Err(Error::AuxiliaryInSelection { column: a.clone(), cohort: k + 1 });
                    }
                }
            }
            if self.aux_features.iter().any(|f| f == a) {
                return Err(Error::Config(format!(
                    "shared auxiliary variable `{a}` cannot also be an auxiliary-model feature"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the fit context. Rows of `sample` with no cohort membership are
/// dropped (they are not part of the selected pool). `n_population` of `None`
/// estimates N by the sum of external design weights, with a warning.
pub fn build_context(
    sample: &CombinedSample,
    external: &ExternalSample,
    roles: &VariableRoles,
    n_population: Option<f64>,
) -> Result<FitContext> {
    roles.validate()?;
    let mut warnings = Vec::new();
    let k = sample.n_cohorts();
    if roles.selection.len() != k {
        return Err(Error::Config(format!(
            "{} selection models specified but the sample has {} cohorts",
            roles.selection.len(),
            k
        )));
    }
    let composite = sample.composite();
    let keep: Vec<usize> = (0..sample.ids.len()).filter(|&i| composite[i] > 0.5).collect();
    if keep.len() < sample.ids.len() {
        warnings.push(format!(
            "{} internal rows have no cohort membership and were dropped",
            sample.ids.len() - keep.len()
        ));
    }
    let n = keep.len();
    if n == 0 {
        return Err(Error::TooFewRows { rows: 0, required: 1 });
    }
    let ids: Vec<i64> = keep.iter().map(|&i| sample.ids[i]).collect();
    let outcome = Array1::from_iter(keep.iter().map(|&i| sample.outcome[i]));
    let mut s = Array2::zeros((n, k));
    let p_cov = sample.covariates.ncols();
    let mut covariates = Array2::zeros((n, p_cov));
    for (r, &i) in keep.iter().enumerate() {
        for c in 0..k {
            s[(r, c)] = sample.membership[(i, c)];
        }
        for c in 0..p_cov {
            covariates[(r, c)] = sample.covariates[(i, c)];
        }
    }

    // Disease design: intercept, shared auxiliary block, remaining covariates.
    let mut ordered: Vec<String> = roles.aux_shared.clone();
    for d in &roles.disease {
        if !roles.aux_shared.iter().any(|a| a == d) {
            ordered.push(d.clone());
        }
    }
    let disease_terms: Vec<String> =
        std::iter::once("(Intercept)".to_string()).chain(ordered.iter().cloned()).collect();
    let mut disease_design = Array2::ones((n, ordered.len() + 1));
    for (j, name) in ordered.iter().enumerate() {
        let idx = sample.column(name).ok_or_else(|| Error::MissingColumn {
            dataset: "internal".into(),
            column: name.clone(),
        })?;
        for r in 0..n {
            disease_design[(r, j + 1)] = covariates[(r, idx)];
        }
    }

    // Selection designs.
    let mut sel_design = Vec::with_capacity(k);
    let mut ext_sel_design = Vec::with_capacity(k);
    let mut sel_terms = Vec::with_capacity(k);
    for terms in &roles.selection {
        let parsed: Vec<Term> = terms.iter().map(|t| parse_term(t)).collect();
        sel_design.push(design_from_terms(
            &parsed,
            "internal",
            &sample.covariate_names,
            &covariates,
            Some(&outcome),
        )?);
        ext_sel_design.push(design_from_terms(
            &parsed,
            "external",
            &external.covariate_names,
            &external.covariates,
            None,
        )?);
        sel_terms.push(
            std::iter::once("(Intercept)".to_string()).chain(terms.iter().cloned()).collect(),
        );
    }

    // Auxiliary score features.
    let aux_terms: Vec<Term> = roles.aux_features.iter().map(|t| parse_term(t)).collect();
    let (aux_features, ext_aux_features) = if aux_terms.is_empty() {
        (Array2::zeros((n, 0)), Array2::zeros((external.ids.len(), 0)))
    } else {
        let internal = design_from_terms(
            &aux_terms,
            "internal",
            &sample.covariate_names,
            &covariates,
            Some(&outcome),
        )?;
        let ext = design_from_terms(
            &aux_terms,
            "external",
            &external.covariate_names,
            &external.covariates,
            None,
        )?;
        // drop the intercept column: tree learners do not need it
        (
            internal.slice(ndarray::s![.., 1..]).to_owned(),
            ext.slice(ndarray::s![.., 1..]).to_owned(),
        )
    };

    // External values of the non-shared disease covariates (may legitimately
    // be missing when the augmented estimator is not used; record a warning
    // and leave an empty matrix in that case).
    let zminus_names: Vec<&String> =
        ordered.iter().skip(roles.aux_shared.len()).collect();
    let mut ext_zminus = Array2::zeros((external.ids.len(), zminus_names.len()));
    let mut zminus_ok = true;
    for (j, name) in zminus_names.iter().enumerate() {
        match external.column(name) {
            Some(idx) => {
                for r in 0..external.ids.len() {
                    ext_zminus[(r, j)] = external.covariates[(r, idx)];
                }
            }
            None => {
                zminus_ok = false;
                warnings.push(format!(
                    "external sample lacks disease covariate `{name}`; augmented estimation unavailable"
                ));
            }
        }
    }
    if !zminus_ok {
        ext_zminus = Array2::zeros((0, 0));
    }

    // Overlap by id.
    let ext_index: HashMap<i64, usize> =
        external.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let overlap: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .filter_map(|(r, id)| ext_index.get(id).map(|&e| (r, e)))
        .collect();

    // Population size.
    let design_weight_sum: f64 = external.pi_ext.iter().map(|&p| 1.0 / p).sum();
    let n_population = match n_population {
        Some(v) => {
            if v > 0.0 && (design_weight_sum - v).abs() / v > 0.10 {
                warnings.push(format!(
                    "sum of external design weights ({design_weight_sum:.1}) differs from the stated population size ({v:.1}) by more than 10%"
                ));
            }
            v
        }
        None => {
            warnings.push(format!(
                "population size not supplied; using the sum of external design weights ({design_weight_sum:.1})"
            ));
            design_weight_sum
        }
    };

    Ok(FitContext {
        n_population,
        k,
        ids,
        outcome,
        covariate_names: sample.covariate_names.clone(),
        covariates,
        s,
        disease_design,
        disease_terms,
        n_aux_shared: roles.aux_shared.len(),
        sel_design,
        sel_terms,
        ext_sel_design,
        ext_ids: external.ids.clone(),
        ext_pi: external.pi_ext.clone(),
        overlap,
        aux_features,
        ext_aux_features,
        aux_feature_names: roles.aux_features.clone(),
        ext_zminus,
        warnings,
    })
}

impl FitContext {
    pub fn n_internal(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_external(&self) -> usize {
        self.ext_pi.len()
    }

    /// Rows belonging to cohort `k` (0-based).
    pub fn cohort_rows(&self, k: usize) -> Vec<usize> {
        (0..self.n_internal()).filter(|&i| self.s[(i, k)] > 0.5).collect()
    }

    /// Disease-design column indices of the non-shared covariates.
    pub fn zminus_design_cols(&self) -> Vec<usize> {
        (self.n_aux_shared + 1..self.disease_design.ncols()).collect()
    }

    /// Evaluates a term (column, `D`, or product) on the selected rows.
    pub fn term_values(&self, label: &str) -> Result<Array1<f64>> {
        let term = parse_term(label);
        term_column(&term, "internal", &self.covariate_names, &self.covariates, Some(&self.outcome))
    }
}
