use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{support_matches, FitMetrics};
use super::monte_carlo::{run_monte_carlo, MonteCarloSummary};
use super::{simulate_with, DgpSpec, Simulation};
use crate::changepoint::{
    ari, build_saturated_basis, divide_and_conquer, segmentation, CandidateKind, CandidateSet, CandidateSpec,
    ChangeReport, DacAggregation, DetectOptions,
};
use crate::error::{Error, Result};
use crate::estimator::fit_with_artifacts;
use crate::inference::{covariance, normal_quantile, CovarianceMethod};
use crate::model::FitSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSpec {
    /// Zero-based coordinates; the selected set when absent.
    #[serde(default)]
    pub active: Option<Vec<usize>>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub method: CovarianceMethod,
}

fn default_level() -> f64 {
    0.95
}

fn default_overlap() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DacSpec {
    pub subset_size: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default)]
    pub aggregation: DacAggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSettings {
    pub name: String,
    pub settings: FitSettings,
}

/// What is done with each simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Analysis {
    /// Fit the true basis and score the estimates.
    Fit {
        #[serde(default)]
        settings: FitSettings,
        #[serde(default)]
        infer: Option<InferSpec>,
    },
    /// Several fits of the same panel; metric names are prefixed by each variant's name.
    Compare { variants: Vec<NamedSettings> },
    /// Change-point or threshold detection.
    Detect {
        #[serde(default)]
        settings: FitSettings,
        candidates: CandidateSpec,
        #[serde(default)]
        with_constant: bool,
        #[serde(default)]
        options: DetectOptions,
        #[serde(default)]
        dac: Option<DacSpec>,
    },
}

/// A process together with the analysis applied to every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub dgp: DgpSpec,
    pub analysis: Analysis,
}

impl Study {
    pub fn replicate(&self, reps: usize, workers: usize, seed: u64) -> Result<MonteCarloSummary> {
        self.dgp.validate()?;
        run_monte_carlo(reps, workers, seed, |_, rng| run_replication(self, rng))
    }
}

/// Simulate one panel and score the analysis.
pub fn run_replication(study: &Study, rng: &mut ChaCha8Rng) -> Result<Vec<(String, f64)>> {
    let sim = simulate_with(&study.dgp, rng)?;
    match &study.analysis {
        Analysis::Fit { settings, infer } => fit_metrics(&sim, settings, infer.as_ref()),
        Analysis::Compare { variants } => {
            let mut out = Vec::new();
            for v in variants {
                for (name, value) in fit_metrics(&sim, &v.settings, None)? {
                    out.push((format!("{}.{name}", v.name), value));
                }
            }
            Ok(out)
        }
        Analysis::Detect { settings, candidates, with_constant, options, dac } => {
            detect_metrics(&sim, settings, candidates, *with_constant, options, dac.as_ref())
        }
    }
}

fn fit_metrics(sim: &Simulation, settings: &FitSettings, infer: Option<&InferSpec>) -> Result<Vec<(String, f64)>> {
    let spec = settings.spec(sim.weights.clone(), sim.basis.clone());
    let (fit, artifacts) = fit_with_artifacts(&sim.data, &spec)?;
    let mut out = FitMetrics::new(fit.phi.as_slice(), fit.beta.as_slice(), fit.mu.as_slice(), &sim.truth).named();
    if let Some(infer) = infer {
        let active = infer.active.as_deref();
        let Some(h) = active else {
            return Err(Error::Config("Monte Carlo inference needs a fixed active set".into()));
        };
        let cov = covariance(
            &fit,
            &artifacts.instruments,
            &artifacts.design,
            &spec.basis,
            spec.tau_star_for(sim.data.t_len()),
            Some(h),
            infer.method,
        )?;
        let se = cov.standard_errors();
        let q = normal_quantile(infer.level)?;
        for (k, &i) in h.iter().enumerate() {
            let label = spec.basis.coef(i).label();
            let z = (fit.phi[i] - sim.truth.phi[i]) / se[k];
            out.push((format!("cover_{label}"), f64::from(u8::from(z.abs() <= q))));
            out.push((format!("z_{label}"), z));
        }
    }
    Ok(out)
}

fn detect_metrics(
    sim: &Simulation,
    settings: &FitSettings,
    candidates: &CandidateSpec,
    with_constant: bool,
    options: &DetectOptions,
    dac: Option<&DacSpec>,
) -> Result<Vec<(String, f64)>> {
    let t_len = sim.data.t_len();
    let driver = match candidates.kind() {
        CandidateKind::TimeBreak => CandidateSet::time_driver(t_len),
        CandidateKind::Threshold if sim.truth.driver.len() == t_len => sim.truth.driver.clone(),
        CandidateKind::Threshold => {
            return Err(Error::Config("threshold candidates need a process with an observed driver".into()))
        }
    };
    let set = candidates.build(t_len, &driver, with_constant)?;
    let dac = dac.copied().unwrap_or(DacSpec {
        subset_size: set.len().max(2),
        overlap: 1,
        aggregation: DacAggregation::Aggregate,
    });
    let report = divide_and_conquer(
        &sim.data,
        &sim.weights,
        &set,
        &driver,
        dac.subset_size,
        dac.overlap,
        dac.aggregation,
        settings,
        options,
    )?;
    let changes = report.changes(&driver);
    let truth_labels = segmentation(&driver, &sim.truth.breaks);
    let mut out = vec![
        ("k_hat".to_string(), changes.len() as f64),
        ("ari".to_string(), ari(&segmentation(&driver, &changes), &truth_labels)),
    ];
    if set.kind == CandidateKind::TimeBreak {
        out.push(("true_unique".into(), true_unique(&report, &set, &driver, &sim.truth.breaks)?));
    }
    if sim.truth.breaks.is_empty() {
        out.push(("false_discovery".into(), f64::from(u8::from(!changes.is_empty()))));
    }
    Ok(out)
}

/// One when the nonzero coefficients are exactly those of the true breaks.
fn true_unique(report: &ChangeReport, set: &CandidateSet, driver: &[f64], breaks: &[f64]) -> Result<f64> {
    let Some(fit) = &report.fit else {
        return Ok(f64::from(u8::from(breaks.is_empty())));
    };
    let final_set = CandidateSet { values: report.candidates.clone(), ..set.clone() };
    let basis = build_saturated_basis(&final_set, driver, fit_p(fit.phi.len(), &final_set))?;
    let mut support = Vec::new();
    for b in breaks {
        let Some(l) = final_set.values.iter().position(|v| v == b) else {
            return Ok(0.0);
        };
        for j in 0..basis.p() {
            support.push(basis.index(j, l + 1)?);
        }
    }
    Ok(f64::from(u8::from(support_matches(fit.phi.as_slice(), &support))))
}

fn fit_p(l: usize, set: &CandidateSet) -> usize {
    let per = set.len() + usize::from(set.with_constant);
    l / per.max(1)
}

/// Fixed-width bins over `[lo, hi)`; values outside land in the edge bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values.iter().filter(|v| v.is_finite()) {
        let k = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c))
        .collect()
}
