//! Run configuration: a versioned TOML schema consumed by the command-line
//! front end. Each subcommand reads its own section (`[fit]`, `[simulate]`,
//! `[meta]`); tabular inputs and outputs are CSV.

use crate::error::{Error, Result};
use crate::sim::{Method, SimScenario};
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: u32,
    pub fit: Option<FitConfig>,
    pub simulate: Option<SimulateConfig>,
    pub meta: Option<MetaConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesConfig {
    pub disease: Vec<String>,
    #[serde(default)]
    pub aux_shared: Vec<String>,
    pub selection: Vec<Vec<String>>,
    #[serde(default)]
    pub aux_features: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataVarConfig {
    pub term: String,
    pub cuts: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub cell: Vec<u8>,
    pub prob: f64,
}

/// Poststratification spec for one cohort: variables with their cutpoints and
/// the exact population cell probabilities.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataConfig {
    pub variables: Vec<StrataVarConfig>,
    pub cells: Vec<CellConfig>,
}

fn default_floor() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}
fn default_gbrt_rounds() -> usize {
    200
}
fn default_max_outer() -> usize {
    50
}
fn default_m_draws() -> usize {
    200
}
fn default_aux() -> String {
    "flexible".into()
}
fn default_variance() -> String {
    "approx".into()
}
fn default_bootstrap() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JaipwOptions {
    /// `flexible` (gradient-boosted trees) or `parametric` (normal model for
    /// the single shared auxiliary covariate).
    #[serde(default = "default_aux")]
    pub aux: String,
    #[serde(default = "default_gbrt_rounds")]
    pub gbrt_rounds: usize,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_m_draws")]
    pub m_draws: usize,
    /// `approx`, `bootstrap`, or `none`.
    #[serde(default = "default_variance")]
    pub variance: String,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_replicates: usize,
}

impl Default for JaipwOptions {
    fn default() -> Self {
        JaipwOptions {
            aux: default_aux(),
            gbrt_rounds: default_gbrt_rounds(),
            max_outer: default_max_outer(),
            m_draws: default_m_draws(),
            variance: default_variance(),
            bootstrap_replicates: default_bootstrap(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub internal: PathBuf,
    pub external: PathBuf,
    /// `unweighted`, `jpl`, `jsr`, `jps`, `jcl`, `known`, or `jaipw`.
    pub method: String,
    pub n_population: Option<f64>,
    #[serde(default = "default_floor")]
    pub prob_floor: f64,
    /// Whether sandwich variances include the estimated-weight correction
    /// (pseudolikelihood and calibration backends).
    #[serde(default = "default_true")]
    pub include_nuisance: bool,
    pub roles: RolesConfig,
    /// Known-weights CSV (`method = "known"`).
    pub weights: Option<PathBuf>,
    /// Population totals per cohort, intercept first (`method = "jcl"`).
    pub totals: Option<Vec<Vec<f64>>>,
    /// Per-cohort strata (`method = "jps"`).
    pub strata: Option<Vec<StrataConfig>>,
    #[serde(default)]
    pub jaipw: JaipwOptions,
}

// no `deny_unknown_fields` here: it cannot be combined with `flatten`
#[derive(Debug, Clone, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub scenario: SimScenario,
    pub methods: Vec<Method>,
    /// Tree-learner rounds for the augmented methods.
    #[serde(default = "default_sim_gbrt_rounds")]
    pub gbrt_rounds: usize,
    #[serde(default = "default_sim_max_outer")]
    pub max_outer: usize,
}

fn default_sim_gbrt_rounds() -> usize {
    200
}
fn default_sim_max_outer() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaInputConfig {
    pub label: String,
    pub estimate: Vec<f64>,
    /// Full covariance matrix, row by row.
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub inputs: Vec<MetaInputConfig>,
    /// Set when any individual belongs to more than one input cohort.
    #[serde(default)]
    pub overlapping: bool,
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let cfg: Config =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.schema != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported schema version {} (this build reads {})",
            cfg.schema, SCHEMA_VERSION
        )));
    }
    Ok(cfg)
}
