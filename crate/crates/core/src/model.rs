//! Domain types shared by every stage: panel data, candidate weight
//! matrices, the dynamic basis attached to each matrix, model
//! settings and fitted results.
//!
//! Coefficients are laid out block by block, one block per weight matrix,
//! constant term first: `(1,0), (1,1), .., (1,l_1), (2,0), .., (p,l_p)`.
//! Every module goes through [`DynamicBasis::index`] and
//! [`DynamicBasis::coef`] rather than computing offsets by hand.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Balanced panel: `d` units observed over `T` periods.
#[derive(Debug, Clone)]
pub struct PanelData {
    /// Outcomes, `d x T`; column `t` is `y_t`.
    pub y: DMatrix<f64>,
    /// Covariates, one `d x r` block per period.
    pub x: Vec<DMatrix<f64>>,
    /// Exogenous instrument sources, one `d x s` block per period.
    pub u: Option<Vec<DMatrix<f64>>>,
}

impl PanelData {
    pub fn new(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        u: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let (d, t_len) = y.shape();
        if d == 0 || t_len == 0 {
            return Err(Error::Dimension("panel must have d >= 1 and T >= 1".into()));
        }
        if x.len() != t_len {
            return Err(Error::Dimension(format!(
                "{} covariate blocks for T = {t_len}",
                x.len()
            )));
        }
        let r = x[0].ncols();
        for (t, block) in x.iter().enumerate() {
            if block.shape() != (d, r) {
                return Err(Error::Dimension(format!(
                    "covariate block {} is {:?}, expected ({d}, {r})",
                    t + 1,
                    block.shape()
                )));
            }
            check_finite("covariates", block.as_slice())?;
        }
        check_finite("outcomes", y.as_slice())?;
        if let Some(u) = &u {
            if u.len() != t_len {
                return Err(Error::Dimension(format!(
                    "{} instrument blocks for T = {t_len}",
                    u.len()
                )));
            }
            let s = u[0].ncols();
            for (t, block) in u.iter().enumerate() {
                if block.shape() != (d, s) {
                    return Err(Error::Dimension(format!(
                        "instrument block {} is {:?}, expected ({d}, {s})",
                        t + 1,
                        block.shape()
                    )));
                }
                check_finite("instruments", block.as_slice())?;
            }
        }
        Ok(Self { y, x, u })
    }

    pub fn d(&self) -> usize {
        self.y.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.y.ncols()
    }

    pub fn r(&self) -> usize {
        self.x[0].ncols()
    }

    /// Restrict to a subset of periods, in the given order.
    pub fn select_periods(&self, periods: &[usize]) -> Result<Self> {
        let y = self.y.select_columns(periods);
        let x = periods.iter().map(|&t| self.x[t].clone()).collect();
        let u = self
            .u
            .as_ref()
            .map(|u| periods.iter().map(|&t| u[t].clone()).collect());
        Self::new(y, x, u)
    }
}

/// The `p` candidate spatial weight matrices.
#[derive(Debug, Clone)]
pub struct WeightSet {
    matrices: Vec<DMatrix<f64>>,
}

impl WeightSet {
    /// Validates shape, finiteness and a zero diagonal. Row normalization is
    /// the caller's choice (see [`crate::weights::row_normalize`]).
    pub fn new(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::Config("at least one weight matrix is required".into()));
        }
        let d = matrices[0].nrows();
        for (j, w) in matrices.iter().enumerate() {
            if w.shape() != (d, d) {
                return Err(Error::Dimension(format!(
                    "weight matrix {} is {:?}, expected ({d}, {d})",
                    j + 1,
                    w.shape()
                )));
            }
            check_finite("weight matrix", w.as_slice())?;
            if (0..d).any(|i| w[(i, i)] != 0.0) {
                return Err(Error::Config(format!(
                    "weight matrix {} has a nonzero diagonal",
                    j + 1
                )));
            }
        }
        Ok(Self { matrices })
    }

    pub fn p(&self) -> usize {
        self.matrices.len()
    }

    pub fn d(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn get(&self, j: usize) -> &DMatrix<f64> {
        &self.matrices[j]
    }

    /// `sum_j c_j W_j`.
    pub fn combine(&self, coefs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d(), self.d());
        for (w, &c) in self.matrices.iter().zip(coefs) {
            if c != 0.0 {
                out += w * c;
            }
        }
        out
    }

    /// `|| sum_j c_j W_j ||_inf` (max absolute row sum) without allocating.
    pub fn combined_inf_norm(&self, coefs: &[f64]) -> f64 {
        let d = self.d();
        let mut best = 0.0f64;
        for i in 0..d {
            let mut row = 0.0;
            for k in 0..d {
                let v: f64 = self
                    .matrices
                    .iter()
                    .zip(coefs)
                    .map(|(w, &c)| c * w[(i, k)])
                    .sum();
                row += v.abs();
            }
            best = best.max(row);
        }
        best
    }
}

/// Dynamic variables attached to one weight matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisBlock {
    /// Whether the block carries the constant term `z_{j,0,t} = 1`.
    pub constant: bool,
    /// Non-constant series `z_{j,1,.}, .., z_{j,l_j,.}`, each of length `T`.
    pub series: Vec<Vec<f64>>,
}

impl BasisBlock {
    pub fn with_constant(series: Vec<Vec<f64>>) -> Self {
        Self { constant: true, series }
    }

    pub fn without_constant(series: Vec<Vec<f64>>) -> Self {
        Self { constant: false, series }
    }

    fn width(&self) -> usize {
        usize::from(self.constant) + self.series.len()
    }
}

/// Position of a coefficient: weight matrix `matrix` (0-based) and basis
/// term `term` (0 is the constant, `1..=l_j` the dynamic variables).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coef {
    pub matrix: usize,
    pub term: usize,
}

impl Coef {
    /// One-based label `phi_{j,k}` as used in reports.
    pub fn label(&self) -> String {
        format!("phi_{}_{}", self.matrix + 1, self.term)
    }
}

/// The collection of dynamic variables `z_{j,k,t}` for all weight matrices.
#[derive(Debug, Clone)]
pub struct DynamicBasis {
    t_len: usize,
    blocks: Vec<BasisBlock>,
    offsets: Vec<usize>,
    coefs: Vec<Coef>,
}

impl DynamicBasis {
    pub fn new(t_len: usize, blocks: Vec<BasisBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("basis needs at least one block".into()));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut coefs = Vec::new();
        for (j, block) in blocks.iter().enumerate() {
            for (k, s) in block.series.iter().enumerate() {
                if s.len() != t_len {
                    return Err(Error::Dimension(format!(
                        "series z_{{{},{}}} has length {}, expected {t_len}",
                        j + 1,
                        k + 1,
                        s.len()
                    )));
                }
                check_finite("dynamic variable", s)?;
            }
            offsets.push(coefs.len());
            let first = if block.constant { 0 } else { 1 };
            for term in first..=block.series.len() {
                coefs.push(Coef { matrix: j, term });
            }
        }
        if coefs.is_empty() {
            return Err(Error::Config("basis has no coefficients".into()));
        }
        Ok(Self { t_len, blocks, offsets, coefs })
    }

    /// Constant-only basis: the classical time-invariant model.
    pub fn constants(t_len: usize, p: usize) -> Self {
        Self::new(t_len, vec![BasisBlock::with_constant(vec![]); p]).expect("valid constant basis")
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    /// Total coefficient count `L`.
    pub fn len(&self) -> usize {
        self.coefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefs.is_empty()
    }

    pub fn blocks(&self) -> &[BasisBlock] {
        &self.blocks
    }

    /// Number of non-constant dynamic variables per matrix, `l_j`.
    pub fn lengths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.series.len()).collect()
    }

    /// Flat (0-based) position of `(matrix, term)`.
    pub fn index(&self, matrix: usize, term: usize) -> Result<usize> {
        let block = self.blocks.get(matrix).ok_or_else(|| {
            Error::Index(format!("matrix {} of {}", matrix + 1, self.blocks.len()))
        })?;
        if term > block.series.len() || (term == 0 && !block.constant) {
            return Err(Error::Index(format!(
                "term {term} not present for matrix {}",
                matrix + 1
            )));
        }
        let shift = if block.constant { term } else { term - 1 };
        Ok(self.offsets[matrix] + shift)
    }

    pub fn coef(&self, i: usize) -> Coef {
        self.coefs[i]
    }

    pub fn coefs(&self) -> &[Coef] {
        &self.coefs
    }

    pub fn labels(&self) -> Vec<String> {
        self.coefs.iter().map(Coef::label).collect()
    }

    /// Range of flat positions owned by `matrix`.
    pub fn block_range(&self, matrix: usize) -> std::ops::Range<usize> {
        let start = self.offsets[matrix];
        start..start + self.blocks[matrix].width()
    }

    /// `z_{j,k,t}` for flat coordinate `i` at period `t` (0-based).
    pub fn value(&self, i: usize, t: usize) -> f64 {
        let c = self.coefs[i];
        if c.term == 0 {
            1.0
        } else {
            self.blocks[c.matrix].series[c.term - 1][t]
        }
    }

    /// The stacked vector `z_t`.
    pub fn z(&self, t: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i, t)).collect()
    }

    /// Whether coordinate `i`'s series vanishes at every period.
    pub fn is_identically_zero(&self, i: usize) -> bool {
        (0..self.t_len).all(|t| self.value(i, t) == 0.0)
    }

    /// Per-matrix spatial coefficients `phi_{j,0} + sum_k phi_{j,k} z_{j,k,t}`.
    pub fn matrix_coefficients(&self, phi: &[f64], t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.p()];
        for (i, c) in self.coefs.iter().enumerate() {
            if phi[i] != 0.0 {
                out[c.matrix] += phi[i] * self.value(i, t);
            }
        }
        out
    }

    /// Restrict every series to a subset of periods.
    pub fn select_periods(&self, periods: &[usize]) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BasisBlock {
                constant: b.constant,
                series: b
                    .series
                    .iter()
                    .map(|s| periods.iter().map(|&t| s[t]).collect())
                    .collect(),
            })
            .collect();
        Self::new(periods.len(), blocks)
    }
}

/// Total spatial correlation `rho_t = z_t' phi` at period `t` (0-based).
pub fn rho_t(phi: &[f64], basis: &DynamicBasis, t: usize) -> f64 {
    phi.iter()
        .enumerate()
        .map(|(i, &v)| v * basis.value(i, t))
        .sum()
}

/// How the tuning parameter grid is formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// `points` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
    Auto { points: usize, ratio: f64 },
    /// Explicit values; zero is allowed and yields the unpenalized fit.
    Explicit(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto { points: 50, ratio: 1e-4 }
    }
}

/// Criterion minimized over the lambda grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Penalty `|H| log(T)/T log(log(L))`, for growing `L`.
    #[default]
    BicGrowingL,
    /// Penalty `|H| log(T)/T`.
    BicFixed,
    /// Residual term only, no complexity penalty.
    ResidualOnly,
    /// K-fold cross validation over periods on the residual sum of squares.
    CrossValidation { folds: usize },
}

/// Treatment of the stationarity constraints `|z_t'phi| < 1`, `||W_t||_inf < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Shrink an infeasible solution toward zero onto the feasible region.
    #[default]
    Backtrack,
    /// Report an infeasible solution as an error.
    Reject,
    /// Skip the check.
    Off,
}

/// Coordinate descent controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_sweeps: 10_000 }
    }
}

/// Everything needed to fit a model besides the data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub weights: WeightSet,
    pub basis: DynamicBasis,
    /// Highest power of each `W_j` applied to `U_t` when forming instruments.
    pub instrument_depth: usize,
    pub lambda_grid: LambdaGrid,
    pub criterion: Criterion,
    /// Autocovariance truncation for the long-run covariance; `None` uses `floor(T^(1/3))`.
    pub tau_star: Option<usize>,
    pub constraint: ConstraintMode,
    pub solver: SolverOptions,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(weights: WeightSet, basis: DynamicBasis) -> Self {
        FitSettings::default().spec(weights, basis)
    }

    pub fn validate(&self, data: &PanelData) -> Result<()> {
        if self.weights.d() != data.d() {
            return Err(Error::Dimension(format!(
                "weights are {0}x{0} but panel has d = {1}",
                self.weights.d(),
                data.d()
            )));
        }
        if self.basis.p() != self.weights.p() {
            return Err(Error::Dimension(format!(
                "basis has {} blocks for {} weight matrices",
                self.basis.p(),
                self.weights.p()
            )));
        }
        if self.basis.t_len() != data.t_len() {
            return Err(Error::Dimension(format!(
                "basis has T = {} but panel has T = {}",
                self.basis.t_len(),
                data.t_len()
            )));
        }
        match &self.lambda_grid {
            LambdaGrid::Auto { points, ratio } => {
                if *points == 0 || !(*ratio > 0.0 && *ratio < 1.0) {
                    return Err(Error::Config(
                        "auto lambda grid needs points >= 1 and 0 < ratio < 1".into(),
                    ));
                }
            }
            LambdaGrid::Explicit(values) => {
                if values.is_empty() || values.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    return Err(Error::Config(
                        "lambda grid must be nonempty, finite and nonnegative".into(),
                    ));
                }
            }
        }
        if let Some(tau) = self.tau_star {
            if tau >= data.t_len() {
                return Err(Error::Config(format!(
                    "tau_star = {tau} must be below T = {}",
                    data.t_len()
                )));
            }
        }
        if let Criterion::CrossValidation { folds } = self.criterion {
            if folds < 2 || folds > data.t_len() {
                return Err(Error::Config(format!("cannot use {folds} folds")));
            }
        }
        Ok(())
    }

    pub fn tau_star_for(&self, t_len: usize) -> usize {
        self.tau_star
            .unwrap_or_else(|| ((t_len as f64).cbrt().floor() as usize).min(t_len - 1))
    }
}

/// Fitting options that do not depend on the data, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub instrument_depth: usize,
    pub lambda_grid: LambdaGrid,
    pub criterion: Criterion,
    pub tau_star: Option<usize>,
    pub constraint: ConstraintMode,
    pub solver: SolverOptions,
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            instrument_depth: 1,
            lambda_grid: LambdaGrid::default(),
            criterion: Criterion::default(),
            tau_star: None,
            constraint: ConstraintMode::default(),
            solver: SolverOptions::default(),
            seed: 0,
        }
    }
}

impl FitSettings {
    pub fn spec(&self, weights: WeightSet, basis: DynamicBasis) -> ModelSpec {
        ModelSpec {
            weights,
            basis,
            instrument_depth: self.instrument_depth,
            lambda_grid: self.lambda_grid.clone(),
            criterion: self.criterion,
            tau_star: self.tau_star,
            constraint: self.constraint,
            solver: self.solver,
            seed: self.seed,
        }
    }
}

/// One point of the solved lambda path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub criterion: f64,
    pub active: usize,
}

/// A fitted model.
#[derive(Debug, Clone)]
pub struct ModelFit {
    /// Adaptive LASSO estimate.
    pub phi: DVector<f64>,
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    /// Positions with `phi != 0`, increasing.
    pub active_set: Vec<usize>,
    pub lambda: f64,
    /// Criterion value at the chosen lambda.
    pub bic: f64,
    /// Residual sum of squares of the instrumented moment equations.
    pub rss: f64,
    /// `eps_t = y_t - mu - W_t y_t - X_t beta`, `d x T`.
    pub residuals: DMatrix<f64>,
    /// Unpenalized least-squares estimate used for the adaptive weights.
    pub phi_ls: DVector<f64>,
    /// Coordinates fixed at zero because their dynamic variable vanishes identically.
    pub pinned: Vec<usize>,
    /// Factor applied to the unconstrained solution to restore feasibility (1 when interior).
    pub constraint_scale: f64,
    pub path: Vec<PathPoint>,
}

impl ModelFit {
    pub fn active_from(phi: &DVector<f64>) -> Vec<usize> {
        phi.iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Estimated `W_t = sum_j rho_{j,t} W_j`.
    pub fn weight_matrix_at(&self, basis: &DynamicBasis, weights: &WeightSet, t: usize) -> DMatrix<f64> {
        weights.combine(&basis.matrix_coefficients(self.phi.as_slice(), t))
    }

    /// `sum_t ||eps_t||^2 / (T d)`.
    pub fn estimation_error(&self) -> f64 {
        self.residuals.norm_squared() / self.residuals.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis_22(t_len: usize) -> DynamicBasis {
        let s = |v: f64| vec![v; t_len];
        DynamicBasis::new(
            t_len,
            vec![
                BasisBlock::with_constant(vec![s(0.0), s(0.0)]),
                BasisBlock::with_constant(vec![s(0.0), s(0.0)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn coefficient_index_follows_block_order() {
        let b = basis_22(3);
        assert_eq!(b.len(), 6);
        assert_eq!(b.index(0, 0).unwrap(), 0);
        assert_eq!(b.index(1, 2).unwrap(), 5);
        // second block's constant comes right after (1,0),(1,1),(1,2)
        assert_eq!(b.index(1, 0).unwrap(), 3);
    }

    #[test]
    fn coefficient_index_rejects_out_of_range() {
        let b = basis_22(3);
        assert!(matches!(b.index(2, 0), Err(Error::Index(_))));
        assert!(matches!(b.index(0, 3), Err(Error::Index(_))));
        let no_const =
            DynamicBasis::new(2, vec![BasisBlock::without_constant(vec![vec![1.0, 0.0]])]).unwrap();
        assert!(no_const.index(0, 0).is_err());
        assert_eq!(no_const.index(0, 1).unwrap(), 0);
    }

    #[test]
    fn coefficient_index_round_trips() {
        let b = DynamicBasis::new(
            4,
            vec![
                BasisBlock::with_constant(vec![vec![0.0; 4]; 3]),
                BasisBlock::without_constant(vec![vec![0.0; 4]; 2]),
                BasisBlock::with_constant(vec![]),
            ],
        )
        .unwrap();
        assert_eq!(b.len(), 4 + 2 + 1);
        for i in 0..b.len() {
            let c = b.coef(i);
            assert_eq!(b.index(c.matrix, c.term).unwrap(), i);
        }
    }

    #[test]
    fn rho_on_general_setting_coefficients() {
        let t_len = 1;
        let one = vec![1.0; t_len];
        let zero = vec![0.0; t_len];
        let b = DynamicBasis::new(
            t_len,
            vec![
                BasisBlock::with_constant(vec![one.clone(), zero.clone()]),
                BasisBlock::with_constant(vec![zero.clone(), one.clone()]),
            ],
        )
        .unwrap();
        let phi = [0.2, 0.2, 0.0, 0.0, 0.0, 0.3];
        assert!((rho_t(&phi, &b, 0) - 0.7).abs() < 1e-15);
        assert_eq!(rho_t(&[0.0; 6], &b, 0), 0.0);

        let zb = basis_22(1);
        assert!((rho_t(&[0.2, 0.0, 0.0, 0.0, 0.0, 0.0], &zb, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn weight_set_rejects_nonzero_diagonal() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.0]);
        assert!(WeightSet::new(vec![w]).is_err());
    }

    proptest! {
        #[test]
        fn rho_is_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            p1 in proptest::collection::vec(-1.0f64..1.0, 6),
            p2 in proptest::collection::vec(-1.0f64..1.0, 6),
            z in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let basis = DynamicBasis::new(1, vec![
                BasisBlock::with_constant(vec![vec![z[0]], vec![z[1]]]),
                BasisBlock::with_constant(vec![vec![z[2]], vec![z[3]]]),
            ]).unwrap();
            let mix: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect();
            let lhs = rho_t(&mix, &basis, 0);
            let rhs = a * rho_t(&p1, &basis, 0) + b * rho_t(&p2, &basis, 0);
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
