//! Change-point and threshold detection through saturated indicator bases,
//! with a divide-and-conquer scheme for large candidate sets.

mod ari;

pub use ari::ari;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::fit;
use crate::model::{BasisBlock, DynamicBasis, FitSettings, ModelFit, PanelData, WeightSet};

/// What the candidates index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    /// Candidate break periods, one-based; the driver is the time index.
    TimeBreak,
    /// Candidate threshold values of an observed driver `q_t`.
    Threshold,
}

/// How indicators enter the saturated basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorStyle {
    /// `1{q <= c}` on the first matrix and `1{q > c}` on the second.
    #[default]
    PrePost,
    /// A constant plus `1{q <= c}` for every candidate, on every matrix.
    CumulativeLe,
}

/// Which nonzero coefficients flag a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// Both coefficients of a pre/post pair must be nonzero.
    #[default]
    Both,
    /// Any nonzero coefficient attached to the candidate.
    Either,
}

/// Sorted candidate locations or threshold values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub kind: CandidateKind,
    pub values: Vec<f64>,
    pub style: IndicatorStyle,
    /// Add a constant term to each pre/post block (for an unknown regime-to-matrix assignment).
    #[serde(default)]
    pub with_constant: bool,
}

impl CandidateSet {
    pub fn new(kind: CandidateKind, mut values: Vec<f64>, style: IndicatorStyle) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("candidate set is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate values".into()));
        }
        values.sort_by(f64::total_cmp);
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("candidate values must be distinct".into()));
        }
        if kind == CandidateKind::TimeBreak && values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(Error::Config("time-break candidates must be positive integers".into()));
        }
        Ok(Self { kind, values, style, with_constant: false })
    }

    /// Breaks at `delta * l` for `l = 1, .., floor(T/delta) - 1`.
    pub fn time_grid(t_len: usize, delta: usize) -> Result<Self> {
        if delta == 0 || t_len / delta < 2 {
            return Err(Error::Config(format!("grid step {delta} leaves no candidates for T = {t_len}")));
        }
        let values = (1..t_len / delta).map(|l| (delta * l) as f64).collect();
        Self::new(CandidateKind::TimeBreak, values, IndicatorStyle::PrePost)
    }

    /// Empirical quantiles of `driver` at levels `k / parts`, `k = 1, .., parts - 1`.
    pub fn quantiles(driver: &[f64], parts: usize, style: IndicatorStyle) -> Result<Self> {
        if parts < 2 {
            return Err(Error::Config("need at least two quantile parts".into()));
        }
        let mut values: Vec<f64> = (1..parts)
            .map(|k| quantile(driver, k as f64 / parts as f64))
            .collect::<Result<_>>()?;
        values.dedup();
        Self::new(CandidateKind::Threshold, values, style)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self { values, ..self.clone() }
    }

    /// The driver for time breaks, `1, 2, .., T`.
    pub fn time_driver(t_len: usize) -> Vec<f64> {
        (1..=t_len).map(|t| t as f64).collect()
    }

    pub fn validate(&self, t_len: usize) -> Result<()> {
        if self.kind == CandidateKind::TimeBreak {
            if let Some(v) = self.values.iter().find(|&&v| v > t_len as f64) {
                return Err(Error::Config(format!("break candidate {v} beyond T = {t_len}")));
            }
        }
        Ok(())
    }
}

/// Candidate set as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSpec {
    /// Breaks every `delta` periods.
    BreaksGrid { delta: usize },
    BreaksList { values: Vec<f64> },
    /// Thresholds at the `k / parts` quantiles of the driver.
    ThresholdQuantiles {
        parts: usize,
        #[serde(default)]
        style: IndicatorStyle,
    },
    ThresholdList {
        values: Vec<f64>,
        #[serde(default)]
        style: IndicatorStyle,
    },
}

impl CandidateSpec {
    pub fn kind(&self) -> CandidateKind {
        match self {
            CandidateSpec::BreaksGrid { .. } | CandidateSpec::BreaksList { .. } => CandidateKind::TimeBreak,
            _ => CandidateKind::Threshold,
        }
    }

    /// Resolve against a sample; `driver` is only read for quantiles.
    pub fn build(&self, t_len: usize, driver: &[f64], with_constant: bool) -> Result<CandidateSet> {
        let mut set = match self {
            CandidateSpec::BreaksGrid { delta } => CandidateSet::time_grid(t_len, *delta)?,
            CandidateSpec::BreaksList { values } => {
                CandidateSet::new(CandidateKind::TimeBreak, values.clone(), IndicatorStyle::PrePost)?
            }
            CandidateSpec::ThresholdQuantiles { parts, style } => CandidateSet::quantiles(driver, *parts, *style)?,
            CandidateSpec::ThresholdList { values, style } => {
                CandidateSet::new(CandidateKind::Threshold, values.clone(), *style)?
            }
        };
        set.with_constant = with_constant;
        set.validate(t_len)?;
        Ok(set)
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (the common "type 7" definition).
pub fn quantile(values: &[f64], prob: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("quantile of an empty series".into()));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Config(format!("probability {prob} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn indicator(driver: &[f64], cut: f64, below: bool) -> Vec<f64> {
    driver
        .iter()
        .map(|&q| if (q <= cut) == below { 1.0 } else { 0.0 })
        .collect()
}

/// One indicator per candidate and matrix, as laid out by `candidates.style`.
pub fn build_saturated_basis(candidates: &CandidateSet, driver: &[f64], p: usize) -> Result<DynamicBasis> {
    let t_len = driver.len();
    candidates.validate(t_len)?;
    let (lo, hi) = driver
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &q| (a.min(q), b.max(q)));
    for &c in &candidates.values {
        if c < lo || c >= hi {
            warn!("candidate {c} does not split the driver range [{lo}, {hi}]; its indicators are constant");
        }
    }
    let pre: Vec<Vec<f64>> = candidates.values.iter().map(|&c| indicator(driver, c, true)).collect();
    let blocks = match candidates.style {
        IndicatorStyle::PrePost => {
            if p != 2 {
                return Err(Error::Config(format!("pre/post indicators need two weight matrices, got {p}")));
            }
            let post = candidates.values.iter().map(|&c| indicator(driver, c, false)).collect();
            let make = if candidates.with_constant { BasisBlock::with_constant } else { BasisBlock::without_constant };
            vec![make(pre), make(post)]
        }
        IndicatorStyle::CumulativeLe => vec![BasisBlock::with_constant(pre); p],
    };
    DynamicBasis::new(t_len, blocks)
}

/// A flagged candidate and the coefficients that flagged it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub value: f64,
    pub coefficients: Vec<(String, f64)>,
}

/// Result of a detection run.
#[derive(Debug, Clone)]
pub struct ChangeReport {
    pub kind: CandidateKind,
    pub detected: Vec<Detection>,
    pub k_hat: usize,
    /// The fit behind the final detection; `None` when no candidate survived.
    pub fit: Option<ModelFit>,
    /// One-based regime labels per period.
    pub segmentation: Vec<usize>,
    /// Candidates of the final fit.
    pub candidates: Vec<f64>,
}

impl ChangeReport {
    pub fn values(&self) -> Vec<f64> {
        self.detected.iter().map(|d| d.value).collect()
    }

    /// Detections that actually split the sample (a break at `T` is no change).
    pub fn changes(&self, driver: &[f64]) -> Vec<f64> {
        let hi = driver.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.values().into_iter().filter(|&v| v < hi).collect()
    }
}

/// Regime labels: period `t` gets `1 + #{c : q_t > c}`.
pub fn segmentation(driver: &[f64], cuts: &[f64]) -> Vec<usize> {
    driver
        .iter()
        .map(|&q| 1 + cuts.iter().filter(|&&c| q > c).count())
        .collect()
}

/// Detection settings beyond the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectOptions {
    pub rule: PairRule,
    /// Refuse candidate sets larger than this.
    pub max_candidates: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { rule: PairRule::Both, max_candidates: 200 }
    }
}

/// Candidates flagged by `phi` under `rule`.
pub fn flagged(phi: &[f64], basis: &DynamicBasis, candidates: &CandidateSet, rule: PairRule) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (l, &value) in candidates.values.iter().enumerate() {
        let term = l + 1;
        let mut coefficients = Vec::new();
        let mut nonzero = Vec::new();
        for j in 0..basis.p() {
            let i = basis.index(j, term)?;
            nonzero.push(phi[i] != 0.0);
            if phi[i] != 0.0 {
                coefficients.push((basis.coef(i).label(), phi[i]));
            }
        }
        let hit = match (candidates.style, rule) {
            (IndicatorStyle::PrePost, PairRule::Both) => nonzero.iter().all(|&b| b),
            _ => nonzero.iter().any(|&b| b),
        };
        if hit {
            out.push(Detection { value, coefficients });
        }
    }
    Ok(out)
}

/// Fit the saturated model and read off flagged candidates.
pub fn detect(
    data: &PanelData,
    weights: &WeightSet,
    candidates: &CandidateSet,
    driver: &[f64],
    settings: &FitSettings,
    options: &DetectOptions,
) -> Result<ChangeReport> {
    if driver.len() != data.t_len() {
        return Err(Error::Dimension(format!(
            "driver has {} periods, panel has {}",
            driver.len(),
            data.t_len()
        )));
    }
    if candidates.len() > options.max_candidates {
        return Err(Error::Config(format!(
            "{} candidates exceed the maximum of {}; use divide and conquer",
            candidates.len(),
            options.max_candidates
        )));
    }
    let basis = build_saturated_basis(candidates, driver, weights.p())?;
    let spec = settings.spec(weights.clone(), basis);
    let fitted = fit(data, &spec)?;
    let detected = flagged(fitted.phi.as_slice(), &spec.basis, candidates, options.rule)?;
    let values: Vec<f64> = detected.iter().map(|d| d.value).collect();
    Ok(ChangeReport {
        kind: candidates.kind,
        k_hat: detected.len(),
        segmentation: segmentation(driver, &values),
        detected,
        fit: Some(fitted),
        candidates: candidates.values.clone(),
    })
}

/// How subset results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DacAggregation {
    /// Pool flagged candidates (dropping shared endpoints not flagged by every
    /// subset containing them) and refit on the pool.
    #[default]
    Aggregate,
    /// Keep the subset fit with the smallest estimation error.
    SmallestError,
}

/// Contiguous subsets of `subset_size` candidates; each subset after the
/// first starts `overlap` candidates before the end of the previous one.
pub fn partition_candidates(values: &[f64], subset_size: usize, overlap: usize) -> Result<Vec<Vec<f64>>> {
    if subset_size < 2 || overlap >= subset_size {
        return Err(Error::Config(format!(
            "subset size {subset_size} with overlap {overlap} is not a valid partition"
        )));
    }
    if values.len() <= subset_size {
        return Ok(vec![values.to_vec()]);
    }
    let step = subset_size - overlap;
    let mut subsets = Vec::new();
    let mut start = 0;
    while start < values.len() {
        let from = start.saturating_sub(overlap);
        let to = (start + step).min(values.len());
        subsets.push(values[from..to].to_vec());
        start += step;
    }
    Ok(subsets)
}

/// Pool per-subset flags: a candidate in several subsets must be flagged in all of them.
pub fn aggregate_flags(subsets: &[Vec<f64>], flags: &[Vec<f64>]) -> Vec<f64> {
    let mut pooled: Vec<f64> = Vec::new();
    for flagged in flags {
        for &v in flagged {
            let everywhere = subsets
                .iter()
                .zip(flags)
                .filter(|(s, _)| s.contains(&v))
                .all(|(_, f)| f.contains(&v));
            if everywhere && !pooled.contains(&v) {
                pooled.push(v);
            }
        }
    }
    pooled.sort_by(f64::total_cmp);
    pooled
}

/// Detection over overlapping candidate subsets followed by a refit on the survivors.
#[allow(clippy::too_many_arguments)]
pub fn divide_and_conquer(
    data: &PanelData,
    weights: &WeightSet,
    candidates: &CandidateSet,
    driver: &[f64],
    subset_size: usize,
    overlap: usize,
    aggregation: DacAggregation,
    settings: &FitSettings,
    options: &DetectOptions,
) -> Result<ChangeReport> {
    let subsets = partition_candidates(&candidates.values, subset_size, overlap)?;
    if subsets.len() == 1 {
        return detect(data, weights, candidates, driver, settings, options);
    }
    let reports: Vec<ChangeReport> = subsets
        .par_iter()
        .map(|s| detect(data, weights, &candidates.with_values(s.clone()), driver, settings, options))
        .collect::<Result<_>>()?;

    match aggregation {
        DacAggregation::SmallestError => {
            let best = reports
                .into_iter()
                .min_by(|a, b| {
                    let ea = a.fit.as_ref().map_or(f64::INFINITY, ModelFit::estimation_error);
                    let eb = b.fit.as_ref().map_or(f64::INFINITY, ModelFit::estimation_error);
                    ea.total_cmp(&eb)
                })
                .expect("at least two subsets");
            Ok(best)
        }
        DacAggregation::Aggregate => {
            let flags: Vec<Vec<f64>> = reports.iter().map(ChangeReport::values).collect();
            let pooled = aggregate_flags(&subsets, &flags);
            if pooled.is_empty() {
                return Ok(ChangeReport {
                    kind: candidates.kind,
                    detected: Vec::new(),
                    k_hat: 0,
                    fit: None,
                    segmentation: vec![1; driver.len()],
                    candidates: Vec::new(),
                });
            }
            detect(data, weights, &candidates.with_values(pooled), driver, settings, options)
        }
    }
}
