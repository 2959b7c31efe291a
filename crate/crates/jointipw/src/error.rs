//! Error taxonomy shared by the estimators, the simulation harness, and the
//! CLI. Numerical failures carry enough context (cohort index, best iterate)
//! for callers to report or recover.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // --- data / role validation ---
    #[error("column `{column}` not found in {dataset} data")]
    MissingColumn { dataset: String, column: String },
    #[error("missing or non-finite value in {dataset} data, row {row}, column `{column}`")]
    MissingValue { dataset: String, row: usize, column: String },
    #[error("outcome must be coded 0/1; found {value} in row {row}")]
    InvalidOutcome { row: usize, value: f64 },
    #[error("auxiliary variable `{column}` appears in the selection model of cohort {cohort}")]
    AuxiliaryInSelection { column: String, cohort: usize },
    #[error("the augmented estimator requires a nonempty shared auxiliary variable set")]
    EmptyAuxiliary,
    #[error("design matrix is rank deficient ({context})")]
    RankDeficient { context: String },

    // --- solver failures ---
    #[error("Jacobian is singular or ill-conditioned ({context})")]
    SingularJacobian { context: String },
    #[error("no convergence after {iterations} iterations ({context}); final residual {residual:.3e}")]
    NoConvergence { context: String, iterations: usize, residual: f64 },
    #[error("response values must lie strictly inside (0, 1); found {value} at row {row}")]
    ResponseOutOfRange { row: usize, value: f64 },
    #[error("category {category} is absent from the multinomial response")]
    MissingCategory { category: usize },
    #[error("too few rows to fit the model: {rows} < {required}")]
    TooFewRows { rows: usize, required: usize },

    // --- selection-model specifics ---
    #[error("cohort {cohort}: no shared individuals between internal and external samples; the membership identity is undefined without the overlap category")]
    OverlapCategoryEmpty { cohort: usize },
    #[error("cohort {cohort}: selected individuals fall in a population cell with probability 0")]
    EmptyCell { cohort: usize },
    #[error("cohort {cohort}: calibration totals are inconsistent with a logistic selection model")]
    InfeasibleCalibration { cohort: usize },
    #[error("selection probabilities are required for every selected row")]
    IncompleteWeights,

    // --- variance estimation ---
    #[error("bread matrix is singular; variance not available")]
    SingularBread,
    #[error("nuisance information matrix is singular; corrected variance not available")]
    SingularH,
    #[error("nonpositive variance for cohort `{cohort}`, coordinate {coordinate}")]
    ZeroVariance { cohort: String, coordinate: usize },
    #[error("{failed} of {total} bootstrap replicates failed (> 10% allowed)")]
    TooManyFailedReplicates { failed: usize, total: usize },

    // --- augmented estimator ---
    #[error("outer loop did not converge within {iterations} iterations; final step {step:.3e}")]
    NoOuterConvergence { iterations: usize, step: f64 },
    #[error("cohort memberships overlap; the no-overlap estimator requires disjoint cohorts")]
    OverlapPresent,

    // --- harness / plumbing ---
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation: method `{method}` failed in {failed} of {total} replicates")]
    StudyFailureRate { method: String, failed: usize, total: usize },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("CSV error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

pub type Result<T> = std::result::Result<T, Error>;
