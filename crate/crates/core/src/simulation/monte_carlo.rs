use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Generator for replication `rep`: the seed picks the key, the replication the stream.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Requested workers, capped by `DSAR_THREADS` when set.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var("DSAR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    /// Replications with a finite value.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub metrics: Vec<String>,
    /// One entry per replication; `None` for a failed one.
    pub per_rep: Vec<Option<Vec<f64>>>,
    pub failed: usize,
    pub rows: Vec<SummaryRow>,
}

impl MonteCarloSummary {
    pub fn row(&self, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn mean(&self, metric: &str) -> f64 {
        self.row(metric).map_or(f64::NAN, |r| r.mean)
    }

    /// Values of `metric` over successful replications.
    pub fn column(&self, metric: &str) -> Vec<f64> {
        let Some(k) = self.metrics.iter().position(|m| m == metric) else {
            return Vec::new();
        };
        self.per_rep.iter().flatten().map(|v| v[k]).collect()
    }
}

/// Run `reps` replications of `job` on up to `workers` threads.
///
/// Each replication gets `rep_rng(seed, rep)`. Results are combined in
/// replication order, so the summary does not depend on `workers`. Every
/// replication must report the same metric names; NaN values are skipped.
pub fn run_monte_carlo<F>(reps: usize, workers: usize, seed: u64, job: F) -> Result<MonteCarloSummary>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<Vec<(String, f64)>> + Sync,
{
    if reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_workers(workers))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<Vec<(String, f64)>>> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|rep| job(rep, &mut rep_rng(seed, rep)))
            .collect()
    });

    let mut metrics: Option<Vec<String>> = None;
    let mut per_rep: Vec<Option<Vec<f64>>> = Vec::with_capacity(reps);
    let mut failed = 0;
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(named) => {
                let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
                match &metrics {
                    None => metrics = Some(names),
                    Some(m) if *m != names => {
                        return Err(Error::Config(format!("replication {rep} reported different metrics")))
                    }
                    _ => {}
                }
                per_rep.push(Some(named.into_iter().map(|(_, v)| v).collect()));
            }
            Err(e) => {
                warn!("replication {rep} failed: {e}");
                failed += 1;
                per_rep.push(None);
            }
        }
    }
    if failed * 20 > reps {
        return Err(Error::TooManyFailures { failed, reps });
    }
    let metrics = metrics.unwrap_or_default();
    let rows = metrics
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let values: Vec<f64> = per_rep.iter().flatten().map(|v| v[k]).filter(|v| !v.is_nan()).collect();
            let (mean, sd) = mean_sd(&values);
            SummaryRow { metric: name.clone(), mean, sd, n: values.len() }
        })
        .collect();
    Ok(MonteCarloSummary { metrics, per_rep, failed, rows })
}

/// Mean and sample standard deviation; the deviation is zero for one value.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
