//! Command-line front end: `fit`, `simulate`, `meta`, and `weights`
//! subcommands over the library. Outputs are written atomically (temp file +
//! rename) only after the whole run has succeeded, so failures leave no
//! partial files. Exit codes: 0 success, 2 configuration error, 3 numerical
//! failure, 4 data error.

use clap::{Args, Parser, Subcommand};
use jointipw::auxscore::{AuxScoreBuilder, FlexibleAux, ParametricAux};
use jointipw::config::{self, FitConfig, MetaConfig, SimulateConfig};
use jointipw::data::{
    build_context, read_external_csv, read_internal_csv, read_weights_csv, FitContext,
    VariableRoles,
};
use jointipw::dr::{
    solve_augmented, variance_augmented_approx, variance_bootstrap, AugmentedConfig,
};
use jointipw::error::Error;
use jointipw::ipw::{
    fit_ipw, fit_unweighted, variance_calibration, variance_known, variance_pseudolikelihood,
    EstimateReport, Z_975,
};
use jointipw::meta::{combine_fixed_effects, MetaInput};
use jointipw::selection::{
    fit_calibration, fit_known, fit_membership_ratio, fit_poststratification,
    fit_pseudolikelihood, CellProbabilities, PopulationTotals, SelectionModelFit, StrataSpec,
    StrataVariable,
};
use jointipw::sim::{self, HarnessConfig, SimScenario};
use jointipw::solvers::gbrt::GbrtConfig;
use jointipw::solvers::NewtonConfig;
use jointipw::Result;
use ndarray::{Array1, Array2};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "jointipw",
    version,
    about = "Selection-bias-corrected disease models for pooled cohorts anchored to an external probability sample"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of every stochastic component.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the disease model on CSV data with one estimator.
    Fit(CommonArgs),
    /// Run a Monte Carlo study and write metric tables.
    Simulate(SimArgs),
    /// Combine externally fitted per-cohort estimates.
    Meta(CommonArgs),
    /// Fit only the selection model and write the weights.
    Weights(CommonArgs),
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Append a comparison against the reference operating-characteristic
    /// bands to the summary.
    #[arg(long)]
    check_tables: bool,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::EmptyAuxiliary | Error::AuxiliaryInSelection { .. } => 2,
        Error::Io { .. }
        | Error::Csv { .. }
        | Error::MissingColumn { .. }
        | Error::MissingValue { .. }
        | Error::InvalidOutcome { .. }
        | Error::IncompleteWeights
        | Error::TooFewRows { .. }
        | Error::ResponseOutOfRange { .. }
        | Error::MissingCategory { .. } => 4,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    let (common, check_tables, is_sim) = match &cli.command {
        Command::Fit(c) | Command::Meta(c) | Command::Weights(c) => (c, false, false),
        Command::Simulate(s) => (&s.common, s.check_tables, true),
    };
    let _ = is_sim;
    if let Some(t) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let run = || -> Result<Vec<(String, String)>> {
        let cfg = config::load(&common.config)?;
        match &cli.command {
            Command::Fit(_) => {
                let fc = cfg
                    .fit
                    .as_ref()
                    .ok_or_else(|| Error::Config("config lacks a [fit] section".into()))?;
                run_fit(fc, common.seed, false)
            }
            Command::Weights(_) => {
                let fc = cfg
                    .fit
                    .as_ref()
                    .ok_or_else(|| Error::Config("config lacks a [fit] section".into()))?;
                run_fit(fc, common.seed, true)
            }
            Command::Simulate(_) => {
                let scfg = cfg
                    .simulate
                    .as_ref()
                    .ok_or_else(|| Error::Config("config lacks a [simulate] section".into()))?;
                run_simulate(scfg, common.seed, check_tables)
            }
            Command::Meta(_) => {
                let mcfg = cfg
                    .meta
                    .as_ref()
                    .ok_or_else(|| Error::Config("config lacks a [meta] section".into()))?;
                run_meta(mcfg)
            }
        }
    };
    match run() {
        Ok(files) => {
            if let Err(err) = write_outputs(&common.out, &files) {
                eprintln!("error: {err}");
                std::process::exit(exit_code(&err));
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// Writes every output atomically; nothing is left behind on failure.
fn write_outputs(dir: &Path, files: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    for (name, content) in files {
        let target = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, content)
            .map_err(|e| Error::Io { path: tmp.display().to_string(), source: e })?;
        std::fs::rename(&tmp, &target)
            .map_err(|e| Error::Io { path: target.display().to_string(), source: e })?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => "NA".into(),
    }
}

fn report_csv(report: &EstimateReport) -> String {
    let se = report.se();
    let mut out = String::from("term,estimate,se,ci_lower,ci_upper\n");
    for (j, term) in report.terms.iter().enumerate() {
        let sj = se.as_ref().map(|s| s[j]);
        let (lo, hi) = match sj {
            Some(s) => (Some(report.estimate[j] - Z_975 * s), Some(report.estimate[j] + Z_975 * s)),
            None => (None, None),
        };
        out.push_str(&format!(
            "{term},{},{},{},{}\n",
            report.estimate[j],
            fmt_opt(sj),
            fmt_opt(lo),
            fmt_opt(hi)
        ));
    }
    out
}

fn weights_csv(ctx: &FitContext, sel: &SelectionModelFit) -> String {
    let mut header = String::from("id");
    for k in 1..=ctx.k {
        header.push_str(&format!(",pi_{k}"));
    }
    header.push_str(",pi_joint\n");
    let mut out = header;
    for i in 0..ctx.n_internal() {
        out.push_str(&ctx.ids[i].to_string());
        for k in 0..ctx.k {
            out.push_str(&format!(",{}", sel.pi_internal[(i, k)]));
        }
        out.push_str(&format!(",{}\n", sel.pi_joint[i]));
    }
    out
}

fn diagnostics_text(
    method: &str,
    ctx: &FitContext,
    sel: Option<&SelectionModelFit>,
    report: Option<&EstimateReport>,
) -> String {
    let mut out = format!("method: {method}\n");
    out.push_str(&format!(
        "internal rows: {}\nexternal rows: {}\ncohorts: {}\npopulation size: {}\noverlap pairs: {}\n",
        ctx.n_internal(),
        ctx.n_external(),
        ctx.k,
        ctx.n_population,
        ctx.overlap.len()
    ));
    if let Some(rep) = report {
        out.push_str(&format!(
            "converged: {}\niterations: {}\nscore residual: {:e}\n",
            rep.converged, rep.iterations, rep.residual
        ));
    }
    if let Some(sel) = sel {
        for (k, r) in sel.residuals.iter().enumerate() {
            out.push_str(&format!("cohort {} selection residual: {:e}\n", k + 1, r));
        }
    }
    let warnings = ctx
        .warnings
        .iter()
        .chain(sel.iter().flat_map(|s| s.warnings.iter()))
        .chain(report.iter().flat_map(|r| r.warnings.iter()));
    for w in warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

fn build_strata(cfgs: &[config::StrataConfig]) -> Vec<StrataSpec> {
    cfgs.iter()
        .map(|c| {
            let mut map = HashMap::new();
            for cell in &c.cells {
                map.insert(cell.cell.clone(), cell.prob);
            }
            StrataSpec {
                variables: c
                    .variables
                    .iter()
                    .map(|v| StrataVariable { term: v.term.clone(), cuts: v.cuts.clone() })
                    .collect(),
                probs: CellProbabilities::Exact(map),
            }
        })
        .collect()
}

fn run_fit(
    fc: &FitConfig,
    seed: Option<u64>,
    weights_only: bool,
) -> Result<Vec<(String, String)>> {
    let sample = read_internal_csv(&fc.internal)?;
    let external = read_external_csv(&fc.external)?;
    let roles = VariableRoles {
        disease: fc.roles.disease.clone(),
        aux_shared: fc.roles.aux_shared.clone(),
        selection: fc.roles.selection.clone(),
        aux_features: fc.roles.aux_features.clone(),
    };
    let ctx = build_context(&sample, &external, &roles, fc.n_population)?;
    let newton = NewtonConfig::default();
    let floor = fc.prob_floor;

    let selection = |method: &str| -> Result<SelectionModelFit> {
        match method {
            "jpl" | "jaipw" => fit_pseudolikelihood(&ctx, &newton, floor),
            "jsr" => fit_membership_ratio(&ctx, &newton, floor),
            "jps" => {
                let strata = fc.strata.as_ref().ok_or_else(|| {
                    Error::Config("method `jps` needs a [[fit.strata]] block per cohort".into())
                })?;
                fit_poststratification(&ctx, &build_strata(strata), floor)
            }
            "jcl" => {
                let totals = fc.totals.as_ref().ok_or_else(|| {
                    Error::Config("method `jcl` needs `totals` per cohort".into())
                })?;
                let totals = PopulationTotals {
                    totals: totals.iter().map(|t| Array1::from(t.clone())).collect(),
                };
                fit_calibration(&ctx, &totals, &newton, floor)
            }
            "known" => {
                let path = fc.weights.as_ref().ok_or_else(|| {
                    Error::Config("method `known` needs a `weights` CSV".into())
                })?;
                let kw = read_weights_csv(path, ctx.k)?;
                fit_known(&ctx, &kw, floor)
            }
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    };

    if weights_only {
        let method = if fc.method == "unweighted" {
            return Err(Error::Config("`weights` needs a selection-based method".into()));
        } else {
            fc.method.as_str()
        };
        let sel = selection(method)?;
        return Ok(vec![
            ("weights.csv".into(), weights_csv(&ctx, &sel)),
            (
                "diagnostics.txt".into(),
                diagnostics_text(&format!("{method} (weights only)"), &ctx, Some(&sel), None),
            ),
        ]);
    }

    let (report, sel): (EstimateReport, Option<SelectionModelFit>) = match fc.method.as_str() {
        "unweighted" => (fit_unweighted(&ctx, &newton)?, None),
        "jpl" | "jsr" | "jps" | "jcl" | "known" => {
            let sel = selection(&fc.method)?;
            let mut report = fit_ipw(&ctx, &sel, &newton)?;
            let cov = match fc.method.as_str() {
                "jpl" => variance_pseudolikelihood(&ctx, &sel, &report.estimate, fc.include_nuisance)?,
                "jcl" => variance_calibration(&ctx, &sel, &report.estimate, fc.include_nuisance)?,
                _ => variance_known(&ctx, &report.estimate, &sel.pi_joint)?,
            };
            report.covariance = Some(cov);
            (report, Some(sel))
        }
        "jaipw" => {
            let seed = seed.ok_or_else(|| {
                Error::Config("method `jaipw` is stochastic: pass --seed".into())
            })?;
            let sel = selection("jaipw")?;
            let aug = AugmentedConfig {
                newton: newton.clone(),
                max_outer: fc.jaipw.max_outer,
                ..AugmentedConfig::default()
            };
            let builder: Box<dyn AuxScoreBuilder> = match fc.jaipw.aux.as_str() {
                "flexible" => Box::new(FlexibleAux::new(
                    GbrtConfig { n_rounds: fc.jaipw.gbrt_rounds, ..GbrtConfig::default() },
                    seed,
                )),
                "parametric" => Box::new(ParametricAux::new(fc.jaipw.m_draws, seed)),
                other => {
                    return Err(Error::Config(format!("unknown auxiliary model `{other}`")))
                }
            };
            let mut report = solve_augmented(&ctx, &sel, builder.as_ref(), &aug)?;
            match fc.jaipw.variance.as_str() {
                "approx" => {
                    report.covariance = Some(variance_augmented_approx(
                        &ctx,
                        &sel,
                        builder.as_ref(),
                        &report.estimate,
                    )?);
                }
                "bootstrap" => {
                    let cov = variance_bootstrap(
                        &sample,
                        &external,
                        fc.jaipw.bootstrap_replicates,
                        seed,
                        |s, e| {
                            let ctx = build_context(s, e, &roles, fc.n_population)?;
                            let sel = fit_pseudolikelihood(&ctx, &newton, floor)?;
                            let rep = solve_augmented(&ctx, &sel, builder.as_ref(), &aug)?;
                            Ok(rep.estimate)
                        },
                    )?;
                    report.covariance = Some(cov);
                }
                "none" => {}
                other => {
                    return Err(Error::Config(format!("unknown variance mode `{other}`")))
                }
            }
            (report, Some(sel))
        }
        other => return Err(Error::Config(format!("unknown method `{other}`"))),
    };

    let mut files = vec![
        ("estimates.csv".into(), report_csv(&report)),
        (
            "diagnostics.txt".into(),
            diagnostics_text(&fc.method, &ctx, sel.as_ref(), Some(&report)),
        ),
    ];
    if let Some(sel) = &sel {
        files.push(("weights.csv".into(), weights_csv(&ctx, sel)));
    }
    Ok(files)
}

/// Reference bands for `--check-tables`: relative-bias expectations for the
/// scenarios with published operating characteristics.
fn check_tables_text(result: &sim::SimStudyResult) -> String {
    let sc = &result.scenario;
    let get = |method: &str, param: &str| -> Option<f64> {
        result
            .metrics
            .iter()
            .find(|m| m.method == method && m.param == param)
            .map(|m| m.rel_bias_pct)
    };
    let mut out = String::from("\nreference-band comparison:\n");
    let mut checked = false;
    let line = |name: &str, value: Option<f64>, ok: bool| {
        let v = value.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "absent".into());
        format!("  {:<44} {:>10}  {}\n", name, v, if ok { "PASS" } else { "FAIL" })
    };
    if sc.setup == 1 && sc.sel_misspec == [false; 3] {
        for (param, anchor) in [("theta1", 24.21), ("theta2", 41.20), ("theta3", 53.71)] {
            if let Some(v) = get("naive", param) {
                checked = true;
                out.push_str(&line(
                    &format!("naive {param} within 6pp of {anchor}%"),
                    Some(v),
                    (v - anchor).abs() <= 6.0,
                ));
            }
        }
        for method in ["jpl", "jsr", "meta-pl"] {
            for param in ["theta1", "theta2", "theta3"] {
                if let Some(v) = get(method, param) {
                    checked = true;
                    out.push_str(&line(
                        &format!("{method} {param} relative bias <= 5%"),
                        Some(v),
                        v <= 5.0,
                    ));
                }
            }
        }
    }
    if sc.setup == 1 && sc.sel_misspec == [true; 3] {
        if let Some(v) = get("jpl", "theta2") {
            checked = true;
            out.push_str(&line("jpl theta2 relative bias >= 25%", Some(v), v >= 25.0));
        }
    }
    if sc.setup == 2 && sc.sel_misspec == [true; 3] {
        for param in ["theta1", "theta2", "theta3"] {
            if let Some(v) = get("jaipw-aux-d", param) {
                checked = true;
                out.push_str(&line(
                    &format!("jaipw-aux-d {param} relative bias <= 10%"),
                    Some(v),
                    v <= 10.0,
                ));
            }
        }
        if let Some(v) = get("jaipw-aux-nod", "theta1") {
            checked = true;
            out.push_str(&line("jaipw-aux-nod theta1 relative bias >= 10%", Some(v), v >= 10.0));
        }
    }
    if !checked {
        out.push_str("  no reference bands apply to this scenario\n");
    }
    out
}

fn run_simulate(
    scfg: &SimulateConfig,
    seed: Option<u64>,
    check_tables: bool,
) -> Result<Vec<(String, String)>> {
    let mut scenario: SimScenario = scfg.scenario.clone();
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario.validate()?;
    let mut hc = HarnessConfig::default();
    hc.gbrt.n_rounds = scfg.gbrt_rounds;
    hc.augmented.max_outer = scfg.max_outer;
    let result = sim::run_study(&scenario, &hc, &scfg.methods)?;
    let mut summary = sim::summary_text(&result);
    if check_tables {
        summary.push_str(&check_tables_text(&result));
    }
    Ok(vec![
        ("metrics.csv".into(), sim::metrics_csv(&result)),
        ("estimates.csv".into(), sim::estimates_csv(&result)),
        ("summary.txt".into(), summary),
    ])
}

fn run_meta(mcfg: &MetaConfig) -> Result<Vec<(String, String)>> {
    let inputs: Vec<MetaInput> = mcfg
        .inputs
        .iter()
        .map(|inp| {
            let p = inp.estimate.len();
            let mut cov = Array2::zeros((p, p));
            if inp.covariance.len() != p || inp.covariance.iter().any(|r| r.len() != p) {
                return Err(Error::Config(format!(
                    "meta input `{}`: covariance must be {p} x {p}",
                    inp.label
                )));
            }
            for (i, row) in inp.covariance.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    cov[(i, j)] = *v;
                }
            }
            Ok(MetaInput {
                label: inp.label.clone(),
                estimate: Array1::from(inp.estimate.clone()),
                covariance: cov,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let res = combine_fixed_effects(&inputs, mcfg.overlapping)?;
    let mut csv = String::from("coordinate,estimate,se,ci_lower,ci_upper\n");
    for j in 0..res.estimate.len() {
        csv.push_str(&format!(
            "{j},{},{},{},{}\n",
            res.estimate[j],
            res.se[j],
            res.estimate[j] - Z_975 * res.se[j],
            res.estimate[j] + Z_975 * res.se[j]
        ));
    }
    let mut diag = format!("inputs: {}\noverlapping: {}\n", inputs.len(), mcfg.overlapping);
    for w in &res.warnings {
        diag.push_str(&format!("warning: {w}\n"));
    }
    Ok(vec![("meta.csv".into(), csv), ("diagnostics.txt".into(), diag)])
}
