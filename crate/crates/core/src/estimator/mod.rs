//! Least squares, adaptive LASSO with tuning by information criterion or
//! cross validation, and the profiled `beta` and fixed effects.

mod lasso;

pub use lasso::LassoProblem;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::design::{build_design, build_design_parts, build_instruments, DesignMatrices, InstrumentPanel};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::model::{
    ConstraintMode, Criterion, DynamicBasis, LambdaGrid, ModelFit, ModelSpec, PanelData, PathPoint,
    SolverOptions, WeightSet,
};

/// Tolerance on the optimality conditions of each solved grid point.
pub const KKT_TOLERANCE: f64 = 1e-8;
/// Margin kept from the boundary of the stationarity region when backtracking.
pub const FEASIBILITY_MARGIN: f64 = 1e-6;
const WEIGHT_CAP: f64 = 1e10;
/// Lowest extension of an automatic grid, relative to `lambda_max`.
const MIN_LAMBDA_RATIO: f64 = 1e-16;
/// Halvings of a log step when neighbouring supports differ by several coordinates.
const REFINE_DEPTH: usize = 6;

/// Unpenalized estimate `[D'D]^{-1} D'r` with `D = B'V - Xi Y_W`, `r = B'y - Xi y^nu`.
///
/// Pinned coordinates are held at zero and excluded from the system.
pub fn ls_phi(design: &DesignMatrices, basis: &DynamicBasis) -> Result<DVector<f64>> {
    let l = design.l();
    let free: Vec<usize> = (0..l).filter(|i| !design.pinned.contains(i)).collect();
    let mut phi = DVector::zeros(l);
    if free.is_empty() {
        return Ok(phi);
    }
    let d = design.design.select_columns(&free);
    let normal = d.tr_mul(&d);
    let inv = spd_inverse(&normal).map_err(|e| Error::Identification {
        condition: e.condition,
        coefficients: e.columns.iter().map(|&c| basis.coef(free[c]).label()).collect(),
    })?;
    let sol = inv * d.tr_mul(&design.target);
    for (k, &i) in free.iter().enumerate() {
        phi[i] = sol[k];
    }
    Ok(phi)
}

/// `u_i = 1/|phi_i|`, infinite for exact zeros and pinned coordinates, capped at `1e10`.
pub fn adaptive_weights(phi_ls: &DVector<f64>, pinned: &[usize]) -> Vec<f64> {
    phi_ls
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 || pinned.contains(&i) {
                f64::INFINITY
            } else {
                (1.0 / v.abs()).min(WEIGHT_CAP)
            }
        })
        .collect()
}

/// The quadratic form `D'D/T`, `D'r/T` with the given adaptive weights.
pub fn lasso_problem(design: &DesignMatrices, weights: Vec<f64>, lambda: f64) -> LassoProblem {
    let t = design.t_len as f64;
    LassoProblem {
        gram: design.design.tr_mul(&design.design) / t,
        linear: design.design.tr_mul(&design.target) / t,
        weights,
        lambda,
    }
}

/// Information criterion for a residual sum of squares `rss` with `active` nonzeros.
///
/// The growing-`L` penalty needs `log(log(L)) > 0`; for `L < 3` it falls back to
/// the fixed penalty.
pub fn bic(rss: f64, active: usize, t_len: usize, l: usize, criterion: Criterion) -> f64 {
    let t = t_len as f64;
    let fit = (rss / t).max(f64::MIN_POSITIVE).ln();
    let k = active as f64;
    match criterion {
        Criterion::BicGrowingL if l >= 3 => fit + k * t.ln() / t * (l as f64).ln().ln(),
        Criterion::BicGrowingL => {
            static ONCE: std::sync::Once = std::sync::Once::new();
            ONCE.call_once(|| warn!("L = {l} is too small for the growing-L penalty; using the fixed penalty"));
            fit + k * t.ln() / t
        }
        Criterion::BicFixed => fit + k * t.ln() / t,
        Criterion::ResidualOnly | Criterion::CrossValidation { .. } => fit,
    }
}

/// The stationarity region `|z_t'phi| < 1`, `||sum_j rho_{j,t} W_j||_inf < 1` for all `t`.
#[derive(Debug, Clone, Copy)]
pub struct FeasibleRegion<'a> {
    pub basis: &'a DynamicBasis,
    pub weights: &'a WeightSet,
}

impl FeasibleRegion<'_> {
    /// `(max_t |z_t'phi|, max_t ||W_t||_inf)`.
    pub fn extremes(&self, phi: &DVector<f64>) -> (f64, f64) {
        let mut rho = 0.0f64;
        let mut norm = 0.0f64;
        for t in 0..self.basis.t_len() {
            let coefs = self.basis.matrix_coefficients(phi.as_slice(), t);
            rho = rho.max(coefs.iter().sum::<f64>().abs());
            norm = norm.max(self.weights.combined_inf_norm(&coefs));
        }
        (rho, norm)
    }

    /// Apply `mode` to `phi`; returns the (possibly shrunk) point and the factor used.
    pub fn enforce(&self, phi: &DVector<f64>, mode: ConstraintMode) -> Result<(DVector<f64>, f64)> {
        if mode == ConstraintMode::Off {
            return Ok((phi.clone(), 1.0));
        }
        let (rho, norm) = self.extremes(phi);
        let worst = rho.max(norm);
        if worst < 1.0 {
            return Ok((phi.clone(), 1.0));
        }
        match mode {
            ConstraintMode::Reject => Err(Error::Infeasible { max_rho: rho, max_w_norm: norm }),
            _ => {
                if !worst.is_finite() {
                    return Err(Error::Infeasible { max_rho: rho, max_w_norm: norm });
                }
                let tau = (1.0 - FEASIBILITY_MARGIN) / worst;
                Ok((phi * tau, tau))
            }
        }
    }
}

/// Decreasing lambda values for `problem`.
pub fn lambda_values(problem: &LassoProblem, grid: &LambdaGrid) -> Vec<f64> {
    let mut values = match grid {
        LambdaGrid::Explicit(v) => v.clone(),
        LambdaGrid::Auto { points, ratio } => {
            let max = problem.lambda_max();
            if max <= 0.0 {
                vec![0.0]
            } else if *points == 1 {
                vec![max]
            } else {
                let (hi, lo) = (max.ln(), (max * ratio).ln());
                (0..*points)
                    .map(|k| (hi + (lo - hi) * k as f64 / (*points - 1) as f64).exp())
                    .collect()
            }
        }
    };
    values.sort_by(|a, b| b.total_cmp(a));
    values.dedup();
    values
}

/// One solved grid point after the constraint has been applied.
#[derive(Debug, Clone)]
pub struct PathSolution {
    pub lambda: f64,
    pub phi: DVector<f64>,
    pub scale: f64,
}

/// Unconstrained solution at `lambda` from `start`.
fn solve_at(problem: &LassoProblem, lambda: f64, start: &DVector<f64>, solver: &SolverOptions) -> DVector<f64> {
    let p = problem.with_lambda(lambda);
    let (phi, sweeps) = p.solve(start, solver);
    let kkt = p.kkt_residual(&phi);
    if kkt > KKT_TOLERANCE {
        warn!("lambda {lambda:.3e}: optimality residual {kkt:.3e} after {sweeps} sweeps");
    }
    phi
}

fn active_count(phi: &DVector<f64>) -> usize {
    phi.iter().filter(|v| **v != 0.0).count()
}

/// Solve along decreasing `lambdas` with warm starts. Infeasible points under
/// [`ConstraintMode::Reject`] come back as errors in place.
pub fn solve_path(
    problem: &LassoProblem,
    lambdas: &[f64],
    region: &FeasibleRegion,
    mode: ConstraintMode,
    solver: &SolverOptions,
) -> Vec<Result<PathSolution>> {
    let mut start = DVector::zeros(problem.len());
    lambdas
        .iter()
        .map(|&lambda| {
            let phi = solve_at(problem, lambda, &start, solver);
            start = phi.clone();
            region
                .enforce(&phi, mode)
                .map(|(phi, scale)| PathSolution { lambda, phi, scale })
        })
        .collect()
}

/// Unconstrained solutions over the tuning grid, largest lambda first.
///
/// An automatic grid keeps extending downward at the same log step, a block at
/// a time, until every free coordinate is active, so the path is covered even
/// when one direction dominates `lambda_max`. It is then refined between
/// neighbours whose supports differ in more than one coordinate, so that every
/// support the path passes through gets scored.
pub fn tuning_path(problem: &LassoProblem, grid: &LambdaGrid, solver: &SolverOptions) -> Vec<(f64, DVector<f64>)> {
    let mut lambdas = lambda_values(problem, grid);
    let mut raw: Vec<(f64, DVector<f64>)> = Vec::with_capacity(lambdas.len());
    let mut start = DVector::zeros(problem.len());
    let LambdaGrid::Auto { points, ratio } = *grid else {
        for &lambda in &lambdas {
            start = solve_at(problem, lambda, &start, solver);
            raw.push((lambda, start.clone()));
        }
        return raw;
    };

    let free = (0..problem.len()).filter(|&i| !problem.is_pinned(i)).count();
    let floor = problem.lambda_max() * MIN_LAMBDA_RATIO;
    loop {
        for &lambda in &lambdas {
            start = solve_at(problem, lambda, &start, solver);
            raw.push((lambda, start.clone()));
        }
        let last = raw.last().expect("grid is nonempty").0;
        let active = active_count(&start);
        if active >= free || points < 2 || last <= floor {
            break;
        }
        let step = ratio.powf(1.0 / (points - 1) as f64);
        lambdas = (1..points).map(|k| last * step.powi(k as i32)).take_while(|&l| l >= floor).collect();
        if lambdas.is_empty() {
            break;
        }
        debug!("{active} of {free} coordinates active at lambda {last:.3e}; extending the grid");
    }

    let mut out = Vec::with_capacity(raw.len());
    for k in 0..raw.len() {
        out.push(raw[k].clone());
        if let Some(next) = raw.get(k + 1) {
            refine(problem, &raw[k], next, REFINE_DEPTH, solver, &mut out);
        }
    }
    if out.windows(2).any(|w| active_count(&w[1].1) < active_count(&w[0].1)) {
        debug!("active set shrank somewhere along the decreasing lambda path");
    }
    out
}

/// Geometric midpoints between `hi` and `lo` until neighbouring supports differ
/// in at most one coordinate, pushed in decreasing order.
fn refine(
    problem: &LassoProblem,
    hi: &(f64, DVector<f64>),
    lo: &(f64, DVector<f64>),
    depth: usize,
    solver: &SolverOptions,
    out: &mut Vec<(f64, DVector<f64>)>,
) {
    let changed = hi.1.iter().zip(lo.1.iter()).filter(|(a, b)| (**a != 0.0) != (**b != 0.0)).count();
    if depth == 0 || changed <= 1 || lo.0 <= 0.0 {
        return;
    }
    let lambda = (hi.0 * lo.0).sqrt();
    let mid = (lambda, solve_at(problem, lambda, &hi.1, solver));
    refine(problem, hi, &mid, depth - 1, solver, out);
    out.push(mid.clone());
    refine(problem, &mid, lo, depth - 1, solver, out);
}

/// The adaptive LASSO solution at `problem.lambda`, with the constraint applied.
pub fn adaptive_lasso(
    problem: &LassoProblem,
    region: &FeasibleRegion,
    mode: ConstraintMode,
    solver: &SolverOptions,
) -> Result<(DVector<f64>, f64)> {
    let (phi, _) = problem.solve(&DVector::zeros(problem.len()), solver);
    region.enforce(&phi, mode)
}

/// Outcome of tuning.
#[derive(Debug, Clone)]
pub struct Selection {
    pub lambda: f64,
    pub phi: DVector<f64>,
    pub criterion: f64,
    pub rss: f64,
    pub constraint_scale: f64,
    pub path: Vec<PathPoint>,
}

/// Choose lambda over the tuning path. Ties go to the larger lambda.
pub fn select_lambda(
    data: &PanelData,
    spec: &ModelSpec,
    design: &DesignMatrices,
    problem: &LassoProblem,
) -> Result<Selection> {
    let region = FeasibleRegion { basis: &spec.basis, weights: &spec.weights };
    let raw = tuning_path(problem, &spec.lambda_grid, &spec.solver);
    let lambdas: Vec<f64> = raw.iter().map(|p| p.0).collect();
    let cv = match spec.criterion {
        Criterion::CrossValidation { folds } => Some(cv_errors(data, spec, &lambdas, &problem.weights, folds)?),
        _ => None,
    };

    let mut best: Option<Selection> = None;
    let mut path = Vec::with_capacity(raw.len());
    let mut last_err = None;
    for (k, (lambda, phi)) in raw.into_iter().enumerate() {
        let (phi, scale) = match region.enforce(&phi, spec.constraint) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let rss = design.residual(&phi).norm_squared();
        let active = active_count(&phi);
        let value = match &cv {
            Some(errors) => errors[k],
            None => bic(rss, active, design.t_len, design.l(), spec.criterion),
        };
        path.push(PathPoint { lambda, criterion: value, active });
        if best.as_ref().is_none_or(|b| value < b.criterion) {
            best = Some(Selection { lambda, phi, criterion: value, rss, constraint_scale: scale, path: Vec::new() });
        }
    }
    let mut best = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Config("empty lambda grid".into())))?;
    best.path = path;
    Ok(best)
}

/// Out-of-fold squared error of the structural equation for each lambda.
fn cv_errors(
    data: &PanelData,
    spec: &ModelSpec,
    lambdas: &[f64],
    weights_u: &[f64],
    folds: usize,
) -> Result<Vec<f64>> {
    let t_len = data.t_len();
    let mut order: Vec<usize> = (0..t_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut errors = vec![0.0; lambdas.len()];
    for fold in 0..folds {
        let mut train: Vec<usize> = Vec::new();
        let mut test: Vec<usize> = Vec::new();
        for (pos, &t) in order.iter().enumerate() {
            if pos % folds == fold {
                test.push(t);
            } else {
                train.push(t);
            }
        }
        train.sort_unstable();
        test.sort_unstable();
        let sub = data.select_periods(&train)?;
        let sub_basis = spec.basis.select_periods(&train)?;
        let inst = build_instruments(&sub, &spec.weights, spec.instrument_depth)?;
        let design = build_design_parts(&sub, &spec.weights, &sub_basis, &inst)?;
        let problem = lasso_problem(&design, weights_u.to_vec(), 0.0);
        let region = FeasibleRegion { basis: &sub_basis, weights: &spec.weights };
        let solutions = solve_path(&problem, lambdas, &region, spec.constraint, &spec.solver);
        let wy: Vec<DMatrix<f64>> = spec.weights.matrices().iter().map(|w| w * &data.y).collect();
        for (k, solution) in solutions.into_iter().enumerate() {
            let Ok(solution) = solution else {
                errors[k] = f64::INFINITY;
                continue;
            };
            let beta = design.profiled_beta(&solution.phi);
            let mu = estimate_mu_with(&solution.phi, &beta, &sub, &sub_basis, &design.wy);
            for &t in &test {
                let eps = structural_residual(&solution.phi, &beta, &mu, data, &spec.basis, &wy, t);
                errors[k] += eps.norm_squared();
            }
        }
    }
    Ok(errors)
}

fn spatial_lag(phi: &DVector<f64>, basis: &DynamicBasis, wy: &[DMatrix<f64>], t: usize) -> DVector<f64> {
    let coefs = basis.matrix_coefficients(phi.as_slice(), t);
    let mut lag = DVector::zeros(wy[0].nrows());
    for (c, w) in coefs.iter().zip(wy) {
        if *c != 0.0 {
            lag.axpy(*c, &w.column(t), 1.0);
        }
    }
    lag
}

fn structural_residual(
    phi: &DVector<f64>,
    beta: &DVector<f64>,
    mu: &DVector<f64>,
    data: &PanelData,
    basis: &DynamicBasis,
    wy: &[DMatrix<f64>],
    t: usize,
) -> DVector<f64> {
    data.y.column(t) - mu - spatial_lag(phi, basis, wy, t) - &data.x[t] * beta
}

fn estimate_mu_with(
    phi: &DVector<f64>,
    beta: &DVector<f64>,
    data: &PanelData,
    basis: &DynamicBasis,
    wy: &[DMatrix<f64>],
) -> DVector<f64> {
    let mut mu = DVector::zeros(data.d());
    for t in 0..data.t_len() {
        mu += data.y.column(t) - spatial_lag(phi, basis, wy, t) - &data.x[t] * beta;
    }
    mu / data.t_len() as f64
}

/// `T^{-1} sum_t (y_t - W_t y_t - X_t beta)`.
pub fn estimate_mu(
    phi: &DVector<f64>,
    beta: &DVector<f64>,
    data: &PanelData,
    basis: &DynamicBasis,
    weights: &WeightSet,
) -> DVector<f64> {
    let wy: Vec<DMatrix<f64>> = weights.matrices().iter().map(|w| w * &data.y).collect();
    estimate_mu_with(phi, beta, data, basis, &wy)
}

/// `eps_t = y_t - mu - W_t y_t - X_t beta` for every period, as a `d x T` matrix.
pub fn residuals(
    phi: &DVector<f64>,
    beta: &DVector<f64>,
    mu: &DVector<f64>,
    data: &PanelData,
    basis: &DynamicBasis,
    wy: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(data.d(), data.t_len());
    for t in 0..data.t_len() {
        out.set_column(t, &structural_residual(phi, beta, mu, data, basis, wy, t));
    }
    out
}

/// Intermediate objects of a fit, kept for inference.
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub instruments: InstrumentPanel,
    pub design: DesignMatrices,
}

/// Fit the model.
pub fn fit(data: &PanelData, spec: &ModelSpec) -> Result<ModelFit> {
    fit_with_artifacts(data, spec).map(|(fit, _)| fit)
}

pub fn fit_with_artifacts(data: &PanelData, spec: &ModelSpec) -> Result<(ModelFit, FitArtifacts)> {
    spec.validate(data)?;
    let instruments = build_instruments(data, &spec.weights, spec.instrument_depth)?;
    let design = build_design(data, spec, &instruments)?;
    let fit = fit_design(data, spec, &design)?;
    Ok((fit, FitArtifacts { instruments, design }))
}

/// Fit from an already built design.
pub fn fit_design(data: &PanelData, spec: &ModelSpec, design: &DesignMatrices) -> Result<ModelFit> {
    let phi_ls = ls_phi(design, &spec.basis)?;
    let u = adaptive_weights(&phi_ls, &design.pinned);
    let problem = lasso_problem(design, u, 0.0);
    let selection = select_lambda(data, spec, design, &problem)?;
    let phi = selection.phi;
    let beta = design.profiled_beta(&phi);
    let mu = estimate_mu_with(&phi, &beta, data, &spec.basis, &design.wy);
    let residuals = residuals(&phi, &beta, &mu, data, &spec.basis, &design.wy);
    if selection.constraint_scale < 1.0 {
        warn!(
            "estimate shrunk by {:.6} to satisfy the stationarity constraints",
            selection.constraint_scale
        );
    }
    Ok(ModelFit {
        active_set: ModelFit::active_from(&phi),
        phi,
        beta,
        mu,
        lambda: selection.lambda,
        bic: selection.criterion,
        rss: selection.rss,
        residuals,
        phi_ls,
        pinned: design.pinned.clone(),
        constraint_scale: selection.constraint_scale,
        path: selection.path,
    })
}
