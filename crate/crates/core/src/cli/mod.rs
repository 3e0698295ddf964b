//! The `dsar` command line: `dsar fit|detect|simulate|replicate --config <file> [overrides]`.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::changepoint::{
    divide_and_conquer, CandidateKind, CandidateSet, CandidateSpec, ChangeReport, DacAggregation, Detection,
    IndicatorStyle, PairRule,
};
use crate::error::{Error, Result};
use crate::estimator::fit_with_artifacts;
use crate::inference::{coefficient_intervals, covariance, CovarianceMethod};
use crate::io::{basis_from_series, basis_to_series, read_panel, read_series, write_panel, write_series, SeriesTable};
use crate::model::{ConstraintMode, Criterion, DynamicBasis, LambdaGrid, ModelFit, PanelData, PathPoint, WeightSet};
use crate::simulation::{histogram, simulate, Analysis, DacSpec, InferSpec, Study};
use crate::weights::{load_weights, save_weights};
pub use config::RunConfig;
use config::{BasisConfig, HistSpec, PresetRef, WeightFile};

#[derive(Debug, Parser)]
#[command(name = "dsar", version, about = "Dynamic spatial autoregressive panels with multiple weight matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a model; writes fit.json, residuals.csv and se.csv.
    Fit(FitArgs),
    /// Detect change points or thresholds; writes changes.json and segmentation.csv.
    Detect(DetectArgs),
    /// Simulate a panel; writes panel.csv, truth.json, weights/*.csv and a fit config.
    Simulate(SimulateArgs),
    /// Monte Carlo replications; writes summary.csv, per_rep.csv and optionally hist_bins.csv.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Bic,
    BicFixed,
    Residual,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConstraintArg {
    Backtrack,
    Reject,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Asymptotic,
    Sandwich,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Both,
    Either,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Long-format panel CSV.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Dense weight CSV; repeat once per matrix. Replaces the configured list.
    #[arg(long = "weights")]
    pub weights: Vec<PathBuf>,
    /// Series CSV with `z_j_k` columns.
    #[arg(long)]
    pub basis: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FitOverrides {
    /// Explicit lambda values, comma separated; 0 gives the unpenalized fit.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    /// Choose lambda by K-fold cross validation over periods.
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[arg(long, value_enum)]
    pub constraint: Option<ConstraintArg>,
    #[arg(long)]
    pub tau_star: Option<usize>,
    #[arg(long)]
    pub instrument_depth: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitOverrides,
    /// Write standard errors and intervals for the selected coefficients.
    #[arg(long)]
    pub infer: bool,
    /// Zero-based coefficient positions to report instead of the selected set.
    #[arg(long, value_delimiter = ',')]
    pub active: Vec<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, value_enum)]
    pub covariance: Option<MethodArg>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitOverrides,
    /// Break candidates every DELTA periods.
    #[arg(long, value_name = "DELTA", group = "cand")]
    pub breaks_grid: Option<usize>,
    #[arg(long, value_delimiter = ',', group = "cand")]
    pub breaks_list: Vec<f64>,
    /// Threshold candidates at the k/K quantiles of the driver.
    #[arg(long, value_name = "K", group = "cand")]
    pub threshold_quantiles: Option<usize>,
    #[arg(long, value_delimiter = ',', group = "cand")]
    pub threshold_list: Vec<f64>,
    /// Series CSV holding the threshold driver.
    #[arg(long)]
    pub driver: Option<PathBuf>,
    #[arg(long)]
    pub driver_column: Option<String>,
    /// Divide and conquer with subsets of this many candidates.
    #[arg(long, value_name = "SUBSET_SIZE")]
    pub dac: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    /// Give each regime block a constant term.
    #[arg(long)]
    pub with_constant: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PresetArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub t_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub preset: PresetArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReplicateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub preset: PresetArgs,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Worker threads; DSAR_THREADS caps this.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write histograms of the standardized estimates.
    #[arg(long)]
    pub infer_hist: bool,
}

/// Parse `args` (program name first) and run the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&fit_config(&a)?),
        Command::Detect(a) => cmd_detect(&detect_config(&a)?),
        Command::Simulate(a) => cmd_simulate(&simulate_config(&a)?),
        Command::Replicate(a) => cmd_replicate(&replicate_config(&a)?),
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.output {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.panel {
        cfg.data.panel = Some(p.clone());
    }
    if !a.weights.is_empty() {
        cfg.data.weights = a
            .weights
            .iter()
            .map(|path| WeightFile { path: path.clone(), format: Default::default(), normalize: true })
            .collect();
    }
    if let Some(path) = &a.basis {
        let constant = match &cfg.data.basis {
            Some(BasisConfig::Series { constant, .. }) => constant.clone(),
            _ => None,
        };
        cfg.data.basis = Some(BasisConfig::Series { path: path.clone(), constant });
    }
}

fn apply_fit(cfg: &mut RunConfig, a: &FitOverrides) {
    let s = &mut cfg.fit;
    if !a.lambda.is_empty() {
        s.lambda_grid = LambdaGrid::Explicit(a.lambda.clone());
    }
    if let Some(c) = a.criterion {
        s.criterion = match c {
            CriterionArg::Bic => Criterion::BicGrowingL,
            CriterionArg::BicFixed => Criterion::BicFixed,
            CriterionArg::Residual => Criterion::ResidualOnly,
        };
    }
    if let Some(folds) = a.cv_folds {
        s.criterion = Criterion::CrossValidation { folds };
    }
    if let Some(c) = a.constraint {
        s.constraint = match c {
            ConstraintArg::Backtrack => ConstraintMode::Backtrack,
            ConstraintArg::Reject => ConstraintMode::Reject,
            ConstraintArg::Off => ConstraintMode::Off,
        };
    }
    if a.tau_star.is_some() {
        s.tau_star = a.tau_star;
    }
    if let Some(k) = a.instrument_depth {
        s.instrument_depth = k;
    }
}

fn apply_preset(cfg: &mut RunConfig, a: &PresetArgs) -> Result<()> {
    if a.preset.is_none() && a.d.is_none() && a.t_len.is_none() {
        return Ok(());
    }
    let current = cfg.preset.clone();
    let pick = |flag: Option<usize>, old: Option<usize>, what: &str| {
        flag.or(old).ok_or_else(|| Error::Config(format!("preset needs --{what}")))
    };
    let name = a.preset.clone().or_else(|| current.as_ref().map(|p| p.name.clone()));
    let Some(name) = name else {
        return Err(Error::Config("--d/--t-len override a preset, but none is set".into()));
    };
    cfg.preset = Some(PresetRef {
        name,
        d: pick(a.d, current.as_ref().map(|p| p.d), "d")?,
        t_len: pick(a.t_len, current.as_ref().map(|p| p.t_len), "t-len")?,
    });
    cfg.dgp = None;
    Ok(())
}

pub fn fit_config(a: &FitArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    apply_data(&mut cfg, &a.data);
    apply_fit(&mut cfg, &a.fit);
    if a.infer || !a.active.is_empty() || a.level.is_some() || a.covariance.is_some() {
        let mut infer = cfg.infer.clone().unwrap_or(InferSpec { active: None, level: 0.95, method: Default::default() });
        if !a.active.is_empty() {
            infer.active = Some(a.active.clone());
        }
        if let Some(l) = a.level {
            infer.level = l;
        }
        if let Some(m) = a.covariance {
            infer.method = match m {
                MethodArg::Asymptotic => CovarianceMethod::Asymptotic,
                MethodArg::Sandwich => CovarianceMethod::Sandwich,
            };
        }
        cfg.infer = Some(infer);
    }
    Ok(cfg)
}

pub fn detect_config(a: &DetectArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    apply_data(&mut cfg, &a.data);
    apply_fit(&mut cfg, &a.fit);
    let det = &mut cfg.detect;
    let style = match &det.candidates {
        Some(CandidateSpec::ThresholdQuantiles { style, .. } | CandidateSpec::ThresholdList { style, .. }) => *style,
        _ => IndicatorStyle::PrePost,
    };
    if let Some(delta) = a.breaks_grid {
        det.candidates = Some(CandidateSpec::BreaksGrid { delta });
    } else if !a.breaks_list.is_empty() {
        det.candidates = Some(CandidateSpec::BreaksList { values: a.breaks_list.clone() });
    } else if let Some(parts) = a.threshold_quantiles {
        det.candidates = Some(CandidateSpec::ThresholdQuantiles { parts, style });
    } else if !a.threshold_list.is_empty() {
        det.candidates = Some(CandidateSpec::ThresholdList { values: a.threshold_list.clone(), style });
    }
    if let Some(path) = &a.driver {
        let column = a.driver_column.clone().or_else(|| cfg.data.driver.as_ref().and_then(|d| d.column.clone()));
        cfg.data.driver = Some(config::DriverFile { path: path.clone(), column });
    } else if let (Some(c), Some(d)) = (&a.driver_column, &mut cfg.data.driver) {
        d.column = Some(c.clone());
    }
    let det = &mut cfg.detect;
    if let Some(subset_size) = a.dac {
        let old = det.dac;
        det.dac = Some(DacSpec {
            subset_size,
            overlap: old.map_or(1, |d| d.overlap),
            aggregation: old.map_or(DacAggregation::Aggregate, |d| d.aggregation),
        });
    }
    if let Some(overlap) = a.overlap {
        match &mut det.dac {
            Some(d) => d.overlap = overlap,
            None => return Err(Error::Config("--overlap needs --dac".into())),
        }
    }
    if let Some(r) = a.rule {
        det.options.rule = match r {
            RuleArg::Both => PairRule::Both,
            RuleArg::Either => PairRule::Either,
        };
    }
    if a.with_constant {
        det.with_constant = true;
    }
    Ok(cfg)
}

pub fn simulate_config(a: &SimulateArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    apply_preset(&mut cfg, &a.preset)?;
    let mut dgp = cfg.resolve_dgp()?;
    if let Some(seed) = a.seed {
        dgp.seed = seed;
    }
    cfg.dgp = Some(dgp);
    cfg.preset = None;
    Ok(cfg)
}

pub fn replicate_config(a: &ReplicateArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    apply_preset(&mut cfg, &a.preset)?;
    let r = &mut cfg.replicate;
    if let Some(v) = a.reps {
        r.reps = v;
    }
    if let Some(v) = a.workers {
        r.workers = v;
    }
    if let Some(v) = a.seed {
        r.seed = v;
    }
    if a.infer_hist && r.infer_hist.is_none() {
        r.infer_hist = Some(HistSpec::default());
    }
    Ok(cfg)
}

fn json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, json_string(value)?)?)
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Panel, weights and basis named by the config.
pub fn load_inputs(cfg: &RunConfig) -> Result<(PanelData, WeightSet, Option<DynamicBasis>)> {
    let panel_path = cfg.data.panel.as_ref().ok_or_else(|| Error::Config("no panel given".into()))?;
    let data = read_panel(panel_path)?;
    if cfg.data.weights.is_empty() {
        return Err(Error::Config("no weight matrices given".into()));
    }
    let matrices = cfg
        .data
        .weights
        .iter()
        .map(|w| load_weights(&w.path, w.format, Some(data.d()), w.normalize))
        .collect::<Result<Vec<_>>>()?;
    let weights = WeightSet::new(matrices)?;
    let p = weights.p();
    let basis = match &cfg.data.basis {
        None => None,
        Some(BasisConfig::Constants) => Some(DynamicBasis::constants(data.t_len(), p)),
        Some(BasisConfig::Series { path, constant }) => {
            let flags = constant.clone().unwrap_or_else(|| vec![true; p]);
            if flags.len() != p {
                return Err(Error::Config(format!("{} constant flags for {p} weight matrices", flags.len())));
            }
            Some(basis_from_series(&read_series(path)?, &flags)?)
        }
    };
    Ok((data, weights, basis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledValue {
    pub label: String,
    /// One-based weight matrix.
    pub matrix: usize,
    /// Basis term, 0 for the constant.
    pub term: usize,
    pub value: f64,
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub phi: Vec<LabeledValue>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: f64,
    pub bic: f64,
    pub rss: f64,
    pub estimation_error: f64,
    /// Labels of the nonzero coefficients.
    pub active_set: Vec<String>,
    pub phi_ls: Vec<f64>,
    pub constraint_scale: f64,
    pub path: Vec<PathPoint>,
}

impl FitReport {
    pub fn new(fit: &ModelFit, basis: &DynamicBasis) -> Self {
        let phi = fit
            .phi
            .iter()
            .enumerate()
            .map(|(i, &value)| {
                let c = basis.coef(i);
                LabeledValue { label: c.label(), matrix: c.matrix + 1, term: c.term, value }
            })
            .collect();
        Self {
            phi,
            beta: fit.beta.iter().copied().collect(),
            mu: fit.mu.iter().copied().collect(),
            lambda: fit.lambda,
            bic: fit.bic,
            rss: fit.rss,
            estimation_error: fit.estimation_error(),
            active_set: fit.active_set.iter().map(|&i| basis.coef(i).label()).collect(),
            phi_ls: fit.phi_ls.iter().copied().collect(),
            constraint_scale: fit.constraint_scale,
            path: fit.path.clone(),
        }
    }
}

fn residuals_csv(res: &DMatrix<f64>) -> String {
    let mut out = String::from("t,unit,residual\n");
    for t in 0..res.ncols() {
        for i in 0..res.nrows() {
            out.push_str(&format!("{},{},{}\n", t + 1, i + 1, res[(i, t)]));
        }
    }
    out
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let (data, weights, basis) = load_inputs(cfg)?;
    let basis = basis.unwrap_or_else(|| DynamicBasis::constants(data.t_len(), weights.p()));
    let spec = cfg.fit.spec(weights, basis);
    let (fit, artifacts) = fit_with_artifacts(&data, &spec)?;
    let dir = prepare_output(cfg)?;
    write_json(&dir.join("fit.json"), &FitReport::new(&fit, &spec.basis))?;
    fs::write(dir.join("residuals.csv"), residuals_csv(&fit.residuals))?;

    let se_path = dir.join("se.csv");
    let Some(infer) = &cfg.infer else {
        if se_path.exists() {
            fs::remove_file(&se_path)?;
        }
        return Ok(());
    };
    let active = infer.active.clone().unwrap_or_else(|| fit.active_set.clone());
    let mut out = String::from("label,estimate,se,lower,upper\n");
    if active.is_empty() {
        warn!("empty active set: no standard errors to report");
        out.insert_str(0, "# empty active set: no coefficients to report\n");
        fs::write(se_path, out)?;
        return Ok(());
    }
    let cov = covariance(
        &fit,
        &artifacts.instruments,
        &artifacts.design,
        &spec.basis,
        spec.tau_star_for(data.t_len()),
        Some(&active),
        infer.method,
    )?;
    for (&i, iv) in cov.active.iter().zip(coefficient_intervals(&fit, &cov, infer.level)?) {
        out.push_str(&format!("{},{},{},{},{}\n", spec.basis.coef(i).label(), iv.estimate, iv.se, iv.lower, iv.upper));
    }
    fs::write(se_path, out)?;
    Ok(())
}

/// Contents of `changes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangesReport {
    pub kind: CandidateKind,
    pub k_hat: usize,
    /// Detected locations that split the sample, with the coefficients that flagged them.
    pub changes: Vec<Detection>,
    /// Candidates entering the final fit.
    pub candidates: Vec<f64>,
    pub fit: Option<FitReport>,
}

fn driver_for(cfg: &RunConfig, kind: CandidateKind, t_len: usize) -> Result<Vec<f64>> {
    if kind == CandidateKind::TimeBreak {
        return Ok(CandidateSet::time_driver(t_len));
    }
    let file = cfg.data.driver.as_ref().ok_or_else(|| Error::Config("threshold candidates need a driver file".into()))?;
    let table = read_series(&file.path)?;
    let column = match &file.column {
        Some(name) => table.column(name).ok_or_else(|| Error::Config(format!("driver column {name:?} not found")))?,
        None => &table.columns[0],
    };
    if column.len() != t_len {
        return Err(Error::Dimension(format!("driver has {} periods, panel has {t_len}", column.len())));
    }
    Ok(column.to_vec())
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<()> {
    let (data, weights, _) = load_inputs(cfg)?;
    let det = &cfg.detect;
    let spec = det.candidates.as_ref().ok_or_else(|| Error::Config("no candidate set given".into()))?;
    let driver = driver_for(cfg, spec.kind(), data.t_len())?;
    let set = spec.build(data.t_len(), &driver, det.with_constant)?;
    let (subset_size, overlap, aggregation) = match det.dac {
        Some(d) => (d.subset_size, d.overlap, d.aggregation),
        None => (set.len().max(2), 1, DacAggregation::Aggregate),
    };
    let report =
        divide_and_conquer(&data, &weights, &set, &driver, subset_size, overlap, aggregation, &cfg.fit, &det.options)?;
    let dir = prepare_output(cfg)?;
    write_json(&dir.join("changes.json"), &changes_report(&report, &set, &driver)?)?;
    let mut seg = String::from("t,label\n");
    for (t, label) in report.segmentation.iter().enumerate() {
        seg.push_str(&format!("{},{label}\n", t + 1));
    }
    fs::write(dir.join("segmentation.csv"), seg)?;
    info!("{} change(s) detected", report.changes(&driver).len());
    Ok(())
}

fn changes_report(report: &ChangeReport, set: &CandidateSet, driver: &[f64]) -> Result<ChangesReport> {
    let changes = report.changes(driver);
    let fit = match &report.fit {
        Some(fit) => {
            let final_set = CandidateSet { values: report.candidates.clone(), ..set.clone() };
            let p = if set.style == IndicatorStyle::PrePost { 2 } else { fit.phi.len() / (final_set.len() + 1) };
            let basis = crate::changepoint::build_saturated_basis(&final_set, driver, p)?;
            Some(FitReport::new(fit, &basis))
        }
        None => None,
    };
    Ok(ChangesReport {
        kind: report.kind,
        k_hat: changes.len(),
        changes: report.detected.iter().filter(|d| changes.contains(&d.value)).cloned().collect(),
        candidates: report.candidates.clone(),
        fit,
    })
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let dgp = cfg.dgp.clone().ok_or_else(|| Error::Config("no dgp given".into()))?;
    let sim = simulate(&dgp)?;
    let dir = prepare_output(cfg)?;
    write_panel(&dir.join("panel.csv"), &sim.data)?;
    write_json(&dir.join("truth.json"), &sim.truth)?;
    fs::create_dir_all(dir.join("weights"))?;
    let mut weight_files = Vec::new();
    for (j, w) in sim.weights.matrices().iter().enumerate() {
        let name = format!("weights/w{}.csv", j + 1);
        save_weights(&dir.join(&name), w)?;
        weight_files.push(WeightFile { path: name.into(), format: Default::default(), normalize: false });
    }
    let table: SeriesTable = basis_to_series(&sim.basis);
    let basis = if table.names.is_empty() {
        BasisConfig::Constants
    } else {
        write_series(&dir.join("basis.csv"), &table)?;
        BasisConfig::Series {
            path: "basis.csv".into(),
            constant: Some(sim.basis.blocks().iter().map(|b| b.constant).collect()),
        }
    };
    let driver = if sim.truth.driver.is_empty() {
        None
    } else {
        write_series(&dir.join("driver.csv"), &SeriesTable { names: vec!["q".into()], columns: vec![sim.truth.driver.clone()] })?;
        Some(config::DriverFile { path: "driver.csv".into(), column: Some("q".into()) })
    };
    // ready to pass back as `dsar fit --config <dir>/fit_config.json`
    let fit_cfg = RunConfig {
        data: config::DataConfig { panel: Some("panel.csv".into()), weights: weight_files, basis: Some(basis), driver },
        ..Default::default()
    };
    write_json(&dir.join("fit_config.json"), &FitConfigFile::from(&fit_cfg))?;
    info!(
        "simulated d = {}, T = {}; max |rho_t| = {:.4}",
        dgp.d,
        dgp.t_len,
        sim.truth.rho.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    );
    Ok(())
}

/// The data section only, so the written config stays minimal.
#[derive(Serialize)]
struct FitConfigFile<'a> {
    data: &'a config::DataConfig,
}

impl<'a> From<&'a RunConfig> for FitConfigFile<'a> {
    fn from(cfg: &'a RunConfig) -> Self {
        Self { data: &cfg.data }
    }
}

pub fn cmd_replicate(cfg: &RunConfig) -> Result<()> {
    let dgp = cfg.resolve_dgp()?;
    let analysis = cfg.resolve_analysis();
    let hist = cfg.replicate.infer_hist;
    if hist.is_some() && !matches!(analysis, Analysis::Fit { infer: Some(_), .. }) {
        return Err(Error::Config("--infer-hist needs a fit analysis with inference".into()));
    }
    if let Some(h) = hist {
        if h.bins == 0 || !(h.hi > h.lo) {
            return Err(Error::Config("histogram needs bins >= 1 and hi > lo".into()));
        }
    }
    let r = &cfg.replicate;
    let study = Study { dgp, analysis };
    let summary = study.replicate(r.reps, r.workers, r.seed)?;
    if summary.failed > 0 {
        warn!("{} of {} replications failed", summary.failed, r.reps);
    }
    let dir = prepare_output(cfg)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["metric", "mean", "sd"])?;
    for row in &summary.rows {
        w.write_record([row.metric.clone(), row.mean.to_string(), row.sd.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("per_rep.csv"))?;
    let mut header = vec!["rep".to_string(), "status".into()];
    header.extend(summary.metrics.iter().cloned());
    w.write_record(&header)?;
    for (rep, values) in summary.per_rep.iter().enumerate() {
        let mut rec = vec![(rep + 1).to_string()];
        match values {
            Some(v) => {
                rec.push("ok".into());
                rec.extend(v.iter().map(f64::to_string));
            }
            None => {
                rec.push("failed".into());
                rec.extend(summary.metrics.iter().map(|_| String::new()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let hist_path = dir.join("hist_bins.csv");
    if let Some(h) = hist {
        let mut w = csv::Writer::from_path(&hist_path)?;
        w.write_record(["metric", "lo", "hi", "count"])?;
        for metric in summary.metrics.iter().filter(|m| m.starts_with("z_")) {
            for (lo, hi, count) in histogram(&summary.column(metric), h.lo, h.hi, h.bins) {
                w.write_record([metric.clone(), lo.to_string(), hi.to_string(), count.to_string()])?;
            }
        }
        w.flush()?;
    } else if hist_path.exists() {
        fs::remove_file(hist_path)?;
    }
    Ok(())
}
