//! Data-generating processes, weight generators and Monte Carlo metrics.

mod metrics;
mod monte_carlo;
pub mod presets;
mod study;

pub use metrics::{mse, sensitivity, specificity, support_matches, FitMetrics};
pub use monte_carlo::{effective_workers, rep_rng, run_monte_carlo, MonteCarloSummary, SummaryRow};
pub use study::{histogram, run_replication, Analysis, DacSpec, InferSpec, NamedSettings, Study};

use std::path::PathBuf;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BasisBlock, DynamicBasis, PanelData, WeightSet};
use crate::weights::{load_weights, row_normalize, WeightFormat};

/// Attempts at a stationary draw of `z_t`, or a positive definite noise covariance.
const MAX_REDRAWS: usize = 10_000;

/// Circulant adjacency with `k` neighbours on each side, row normalized.
pub fn gen_weight_ahead_behind(d: usize, k: usize) -> Result<DMatrix<f64>> {
    if d <= 2 * k {
        return Err(Error::Dimension(format!("{k} neighbours each side need d > {}, got {d}", 2 * k)));
    }
    let mut w = DMatrix::zeros(d, d);
    for i in 0..d {
        for off in 1..=k {
            w[(i, (i + off) % d)] = 1.0;
            w[(i, (i + d - off) % d)] = 1.0;
        }
    }
    row_normalize(&mut w);
    Ok(w)
}

/// Independent Bernoulli(`p`) off-diagonal contiguity, row normalized.
///
/// With `symmetric` the upper triangle is drawn and mirrored.
pub fn gen_weight_bernoulli<R: Rng + ?Sized>(d: usize, p: f64, symmetric: bool, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("Bernoulli probability {p} outside [0, 1]")));
    }
    let mut w = DMatrix::zeros(d, d);
    for i in 0..d {
        for k in 0..d {
            if i == k || (symmetric && k < i) {
                continue;
            }
            if rng.random::<f64>() < p {
                w[(i, k)] = 1.0;
                if symmetric {
                    w[(k, i)] = 1.0;
                }
            }
        }
    }
    row_normalize(&mut w);
    Ok(w)
}

/// Source of one candidate weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightGen {
    AheadBehind { k: usize },
    Bernoulli {
        p: f64,
        #[serde(default)]
        symmetric: bool,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        format: WeightFormat,
        #[serde(default = "yes")]
        normalize: bool,
    },
    /// Matrix given inline, row by row.
    Dense { rows: Vec<Vec<f64>> },
}

fn yes() -> bool {
    true
}

impl WeightGen {
    fn generate<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        match self {
            WeightGen::AheadBehind { k } => gen_weight_ahead_behind(d, *k),
            WeightGen::Bernoulli { p, symmetric } => gen_weight_bernoulli(d, *p, *symmetric, rng),
            WeightGen::File { path, format, normalize } => load_weights(path, *format, Some(d), *normalize),
            WeightGen::Dense { rows } => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension(format!("inline weight matrix is not {d}x{d}")));
                }
                Ok(DMatrix::from_fn(d, d, |i, k| rows[i][k]))
            }
        }
    }
}

/// Observed series driving regime indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Driver {
    /// `q_t = t`, one-based.
    Time,
    /// Gaussian autoregression `q_t = sum_k a_k q_{t-k} + e_t`.
    Ar { coefs: Vec<f64>, burn_in: usize },
    /// `q_t` is the cross-sectional mean of `y_{t-lag}`, with zero before the sample.
    SelfExciting { lag: usize },
}

/// Indicator `1{q_t <= cut}`, or `1{q_t > cut}` when `above`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cut {
    pub cut: f64,
    #[serde(default)]
    pub above: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalBlock {
    pub constant: bool,
    pub terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorBlock {
    pub constant: bool,
    pub terms: Vec<Cut>,
}

/// How the dynamic variables of the true model evolve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    /// Independent standard normal `z_{j,k,t}`.
    Normal { blocks: Vec<NormalBlock> },
    /// Regime indicators of a driver series.
    Indicators { driver: Driver, blocks: Vec<IndicatorBlock> },
}

impl Dynamics {
    fn widths(&self) -> Vec<(bool, usize)> {
        match self {
            Dynamics::Normal { blocks } => blocks.iter().map(|b| (b.constant, b.terms)).collect(),
            Dynamics::Indicators { blocks, .. } => blocks.iter().map(|b| (b.constant, b.terms.len())).collect(),
        }
    }
}

/// Endogenous covariate: `x_{t,column} += m eps_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endogeneity {
    pub column: usize,
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariates {
    pub r: usize,
    #[serde(default)]
    pub endogenous: Option<Endogeneity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseGen {
    /// Gaussian with unit variances and each upper-triangular correlation
    /// equal to `offdiag` with probability `prob`.
    SparseCorrelated { offdiag: f64, prob: f64 },
    Iid { sd: f64 },
    /// Unscaled Student t.
    StudentT { df: f64 },
}

/// What to do when a draw of `z_t` violates `|rho_t| < 1` or `||W_t||_inf < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationarityPolicy {
    /// Redraw random dynamic variables until the period is stationary.
    #[default]
    Redraw,
    Reject,
}

/// A complete data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub d: usize,
    pub t_len: usize,
    pub weights: Vec<WeightGen>,
    pub dynamics: Dynamics,
    pub phi: Vec<f64>,
    /// Length `d`, or a single value used for every unit.
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub covariates: Covariates,
    pub noise: NoiseGen,
    #[serde(default)]
    pub stationarity: StationarityPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.t_len < 2 {
            return Err(Error::Config("need d >= 1 and T >= 2".into()));
        }
        let widths = self.dynamics.widths();
        if widths.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} dynamic blocks for {} weight matrices",
                widths.len(),
                self.weights.len()
            )));
        }
        let l: usize = widths.iter().map(|&(c, k)| usize::from(c) + k).sum();
        if self.phi.len() != l {
            return Err(Error::Config(format!("phi has {} entries, the dynamics have {l}", self.phi.len())));
        }
        if self.mu.len() != 1 && self.mu.len() != self.d {
            return Err(Error::Config(format!("mu has {} entries for d = {}", self.mu.len(), self.d)));
        }
        if self.beta.len() != self.covariates.r {
            return Err(Error::Config(format!("beta has {} entries for r = {}", self.beta.len(), self.covariates.r)));
        }
        if self.covariates.r == 0 {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        if let Some(e) = self.covariates.endogenous {
            if e.column >= self.covariates.r {
                return Err(Error::Config(format!("endogenous column {} of {}", e.column, self.covariates.r)));
            }
        }
        if let Dynamics::Indicators { driver: Driver::SelfExciting { lag }, .. } = &self.dynamics {
            if *lag == 0 {
                return Err(Error::Config("self-exciting lag must be positive".into()));
            }
        }
        match self.noise {
            NoiseGen::StudentT { df } if df <= 0.0 => Err(Error::Config("Student t needs df > 0".into())),
            NoiseGen::Iid { sd } if sd < 0.0 => Err(Error::Config("noise sd must be non-negative".into())),
            NoiseGen::SparseCorrelated { prob, .. } if !(0.0..=1.0).contains(&prob) => {
                Err(Error::Config("correlation probability outside [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    /// True change locations: distinct cuts carrying a nonzero coefficient
    /// that split the sample.
    pub fn breaks(&self) -> Vec<f64> {
        let Dynamics::Indicators { driver, blocks } = &self.dynamics else {
            return Vec::new();
        };
        let mut i = 0;
        let mut cuts = Vec::new();
        for b in blocks {
            i += usize::from(b.constant);
            for c in &b.terms {
                let splits = !matches!(driver, Driver::Time) || c.cut < self.t_len as f64;
                if self.phi[i] != 0.0 && splits && !cuts.contains(&c.cut) {
                    cuts.push(c.cut);
                }
                i += 1;
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts
    }
}

/// Everything the simulation knows that an analyst would not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub phi: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub labels: Vec<String>,
    pub blocks: Vec<BasisBlock>,
    /// `rho_t = z_t' phi` per period.
    pub rho: Vec<f64>,
    pub max_w_norm: f64,
    pub breaks: Vec<f64>,
    /// Regime driver; `1..T` for time breaks, empty for random dynamics.
    pub driver: Vec<f64>,
    /// Innovations, one vector per period.
    pub eps: Vec<Vec<f64>>,
    pub stationarity_redraws: usize,
    pub noise_redraws: usize,
}

/// A simulated panel with its weights, true basis and truth record.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: PanelData,
    pub weights: WeightSet,
    pub basis: DynamicBasis,
    pub truth: Truth,
}

/// Lower Cholesky factor of the innovation covariance, or `None` for iid noise.
fn noise_factor<R: Rng + ?Sized>(noise: &NoiseGen, d: usize, rng: &mut R) -> Result<(Option<DMatrix<f64>>, usize)> {
    let NoiseGen::SparseCorrelated { offdiag, prob } = *noise else {
        return Ok((None, 0));
    };
    for attempt in 0..MAX_REDRAWS {
        let mut cov = DMatrix::identity(d, d);
        for i in 0..d {
            for k in (i + 1)..d {
                if rng.random::<f64>() < prob {
                    cov[(i, k)] = offdiag;
                    cov[(k, i)] = offdiag;
                }
            }
        }
        if let Some(chol) = cov.cholesky() {
            if attempt > 0 {
                debug!("noise covariance redrawn {attempt} times");
            }
            return Ok((Some(chol.l()), attempt));
        }
    }
    Err(Error::Dgp("no positive definite noise covariance drawn".into()))
}

fn draw_noise<R: Rng + ?Sized>(noise: &NoiseGen, factor: Option<&DMatrix<f64>>, d: usize, rng: &mut R) -> DVector<f64> {
    match *noise {
        NoiseGen::SparseCorrelated { .. } => {
            let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            factor.expect("factor drawn for correlated noise") * e
        }
        NoiseGen::Iid { sd } => DVector::from_fn(d, |_, _| sd * rng.sample::<f64, _>(StandardNormal)),
        NoiseGen::StudentT { df } => {
            let t = StudentT::new(df).expect("validated df");
            DVector::from_fn(d, |_, _| t.sample(rng))
        }
    }
}

fn ar_driver<R: Rng + ?Sized>(coefs: &[f64], burn_in: usize, t_len: usize, rng: &mut R) -> Vec<f64> {
    let mut q: Vec<f64> = Vec::with_capacity(burn_in + t_len);
    for _ in 0..burn_in + t_len {
        let lagged: f64 = coefs
            .iter()
            .enumerate()
            .filter_map(|(k, a)| q.len().checked_sub(k + 1).map(|s| a * q[s]))
            .sum();
        q.push(lagged + rng.sample::<f64, _>(StandardNormal));
    }
    q.split_off(burn_in)
}

/// Simulate with the generator seeded from `dgp.seed`.
pub fn simulate(dgp: &DgpSpec) -> Result<Simulation> {
    simulate_with(dgp, &mut ChaCha8Rng::seed_from_u64(dgp.seed))
}

/// Simulate one panel, solving `(I - W_t) y_t = mu + X_t beta + eps_t` period by period.
pub fn simulate_with<R: Rng + ?Sized>(dgp: &DgpSpec, rng: &mut R) -> Result<Simulation> {
    dgp.validate()?;
    let (d, t_len, r) = (dgp.d, dgp.t_len, dgp.covariates.r);
    let matrices = dgp
        .weights
        .iter()
        .map(|g| g.generate(d, rng))
        .collect::<Result<Vec<_>>>()?;
    let weights = WeightSet::new(matrices)?;
    let (factor, noise_redraws) = noise_factor(&dgp.noise, d, rng)?;
    let mu = if dgp.mu.len() == 1 { DVector::from_element(d, dgp.mu[0]) } else { DVector::from_vec(dgp.mu.clone()) };
    let beta = DVector::from_vec(dgp.beta.clone());

    let widths = dgp.dynamics.widths();
    let mut series: Vec<Vec<Vec<f64>>> = widths.iter().map(|&(_, k)| vec![Vec::with_capacity(t_len); k]).collect();
    let mut driver = match &dgp.dynamics {
        Dynamics::Indicators { driver: Driver::Ar { coefs, burn_in }, .. } => ar_driver(coefs, *burn_in, t_len, rng),
        Dynamics::Indicators { driver: Driver::Time, .. } => (1..=t_len).map(|t| t as f64).collect(),
        _ => Vec::with_capacity(t_len),
    };

    let mut y = DMatrix::zeros(d, t_len);
    let mut x = Vec::with_capacity(t_len);
    let mut u = Vec::with_capacity(t_len);
    let mut eps = Vec::with_capacity(t_len);
    let mut rho = Vec::with_capacity(t_len);
    let mut max_w_norm = 0.0f64;
    let mut redraws = 0;
    let identity = DMatrix::<f64>::identity(d, d);

    for t in 0..t_len {
        if let Dynamics::Indicators { driver: Driver::SelfExciting { lag }, .. } = &dgp.dynamics {
            driver.push(if t >= *lag { y.column(t - lag).mean() } else { 0.0 });
        }
        let mut attempts = 0;
        let (z, coefs) = loop {
            let z = draw_z(&dgp.dynamics, driver.get(t).copied(), rng);
            let coefs = matrix_coefficients(&widths, &dgp.phi, &z);
            let total: f64 = coefs.iter().sum();
            let norm = weights.combined_inf_norm(&coefs);
            if total.abs() < 1.0 && norm < 1.0 {
                max_w_norm = max_w_norm.max(norm);
                rho.push(total);
                break (z, coefs);
            }
            let random = matches!(dgp.dynamics, Dynamics::Normal { .. });
            if !random || dgp.stationarity == StationarityPolicy::Reject || attempts >= MAX_REDRAWS {
                return Err(Error::Dgp(format!(
                    "period {} is not stationary: |rho_t| = {:.6}, ||W_t||_inf = {norm:.6}",
                    t + 1,
                    total.abs()
                )));
            }
            attempts += 1;
        };
        redraws += attempts;
        for (j, zj) in z.into_iter().enumerate() {
            for (k, v) in zj.into_iter().enumerate() {
                series[j][k].push(v);
            }
        }

        let x_exo = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = draw_noise(&dgp.noise, factor.as_ref(), d, rng);
        let mut xt = x_exo.clone();
        if let Some(endo) = dgp.covariates.endogenous {
            let mut col = xt.column_mut(endo.column);
            col.axpy(endo.m, &e, 1.0);
        }
        let rhs = &mu + &xt * &beta + &e;
        let system = &identity - weights.combine(&coefs);
        let yt = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Dgp(format!("I - W_t is singular at period {}", t + 1)))?;
        y.set_column(t, &yt);
        x.push(xt);
        u.push(x_exo);
        eps.push(e.as_slice().to_vec());
    }

    let blocks: Vec<BasisBlock> = widths
        .iter()
        .zip(series)
        .map(|(&(constant, _), s)| BasisBlock { constant, series: s })
        .collect();
    let basis = DynamicBasis::new(t_len, blocks.clone())?;
    let data = PanelData::new(y, x, Some(u))?;
    let truth = Truth {
        phi: dgp.phi.clone(),
        beta: dgp.beta.clone(),
        mu: mu.as_slice().to_vec(),
        labels: basis.labels(),
        blocks,
        rho,
        max_w_norm,
        breaks: dgp.breaks(),
        driver,
        eps,
        stationarity_redraws: redraws,
        noise_redraws,
    };
    Ok(Simulation { data, weights, basis, truth })
}

/// Non-constant dynamic variables of one period, per block.
fn draw_z<R: Rng + ?Sized>(dynamics: &Dynamics, q: Option<f64>, rng: &mut R) -> Vec<Vec<f64>> {
    match dynamics {
        Dynamics::Normal { blocks } => blocks
            .iter()
            .map(|b| (0..b.terms).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect(),
        Dynamics::Indicators { blocks, .. } => {
            let q = q.expect("driver value available");
            blocks
                .iter()
                .map(|b| {
                    b.terms
                        .iter()
                        .map(|c| if (q > c.cut) == c.above { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect()
        }
    }
}

fn matrix_coefficients(widths: &[(bool, usize)], phi: &[f64], z: &[Vec<f64>]) -> Vec<f64> {
    let mut i = 0;
    widths
        .iter()
        .zip(z)
        .map(|(&(constant, _), zj)| {
            let mut rho = 0.0;
            if constant {
                rho += phi[i];
                i += 1;
            }
            for v in zj {
                rho += phi[i] * v;
                i += 1;
            }
            rho
        })
        .collect()
}
