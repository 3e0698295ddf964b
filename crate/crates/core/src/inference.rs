//! Plug-in covariance of the selected coefficients, standard errors and
//! confidence intervals for coefficients and for `rho_t`.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{DesignMatrices, InstrumentPanel};
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::model::{DynamicBasis, ModelFit};

/// Which covariance of `phi_H` to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMethod {
    /// The limiting form, driven by the error of the profiled `beta` alone.
    #[default]
    Asymptotic,
    /// First-order expansion keeping the direct `B' eps` term as well, with
    /// the same truncated long-run sum over periods.
    Sandwich,
}

/// Estimated covariance of `phi_H` and the pieces it was built from.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Coordinates the covariance refers to, increasing.
    pub active: Vec<usize>,
    /// `|H| x |H|`.
    pub cov: DMatrix<f64>,
    /// Long-run covariance of `(B_t - mean)' eps_t`, `v x v`.
    pub sigma_beta: DMatrix<f64>,
    /// `r x v`.
    pub r_beta: DMatrix<f64>,
    /// `T^{-1} sum_t X_t (x) c_t`, `d^2 x r`.
    pub s_gamma: DMatrix<f64>,
    /// `|H| x d^2`.
    pub r_h: DMatrix<f64>,
    pub tau_star: usize,
    pub method: CovarianceMethod,
}

impl CovarianceEstimate {
    pub fn standard_errors(&self) -> DVector<f64> {
        DVector::from_iterator(self.cov.nrows(), self.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()))
    }
}

/// `Gamma_0 + sum_{tau=1}^{tau*} (Gamma_tau + Gamma_tau')` with
/// `Gamma_tau = T^{-1} sum_t w_t w_{t+tau}'` and `w_t = (B_t - mean)' eps_t`.
pub fn estimate_sigma_beta(
    residuals: &DMatrix<f64>,
    inst: &InstrumentPanel,
    tau_star: usize,
) -> Result<DMatrix<f64>> {
    let t_len = residuals.ncols();
    if tau_star >= t_len {
        return Err(Error::Config(format!("tau_star = {tau_star} must be below T = {t_len}")));
    }
    if inst.t_len() != t_len || inst.d() != residuals.nrows() {
        return Err(Error::Dimension("residuals do not match the instruments".into()));
    }
    let v = inst.v();
    let mut w = DMatrix::zeros(v, t_len);
    for t in 0..t_len {
        w.set_column(t, &inst.centered(t).tr_mul(&residuals.column(t)));
    }
    let mut sigma = DMatrix::zeros(v, v);
    for tau in 0..=tau_star {
        let lead = w.columns(tau, t_len - tau);
        let lag = w.columns(0, t_len - tau);
        let gamma = lag * lead.transpose() / t_len as f64;
        if tau == 0 {
            sigma += gamma;
        } else {
            sigma += &gamma + gamma.transpose();
        }
    }
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// `(H_10, H_20) = T^{-1/2} d^{1/2} (B'V, Xi Y_W)`.
pub fn build_sample_h_matrices(design: &DesignMatrices) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = (design.d as f64 / design.t_len as f64).sqrt();
    (&design.bt_v * k, &design.xi_yw * k)
}

/// Plug-in covariance of `phi_H`.
///
/// `active` overrides the fitted active set (for inference on a fixed set).
pub fn covariance_phi(
    fit: &ModelFit,
    inst: &InstrumentPanel,
    design: &DesignMatrices,
    basis: &DynamicBasis,
    tau_star: usize,
    active: Option<&[usize]>,
) -> Result<CovarianceEstimate> {
    let active: Vec<usize> = active.map_or_else(|| fit.active_set.clone(), <[usize]>::to_vec);
    if active.is_empty() {
        return Err(Error::Inference("active set is empty".into()));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= design.l()) {
        return Err(Error::Index(format!("coordinate {bad} of {}", design.l())));
    }
    let t = design.t_len as f64;
    let d = design.d as f64;

    let (h10, h20) = build_sample_h_matrices(design);
    let diff = (h20 - h10).select_columns(&active);
    let normal = diff.tr_mul(&diff);
    let inv = spd_inverse(&normal).map_err(|e| {
        Error::Inference(format!(
            "active design is rank deficient (condition {:.3e}) in {:?}",
            e.condition,
            e.columns.iter().map(|&c| basis.coef(active[c]).label()).collect::<Vec<_>>()
        ))
    })?;
    let r_h = inv * diff.transpose();

    // x_kron_c carries the factor (Td)^{-1/2}; S_gamma is the plain time average.
    let s_gamma = &design.x_kron_c * ((t * d).sqrt() / t);
    let q_bar = &design.x_b / t;
    let gram_inv = spd_inverse(&(&q_bar * q_bar.transpose())).map_err(|e| Error::RankDeficient {
        condition: e.condition,
        columns: e.columns,
    })?;
    let r_beta = gram_inv * &q_bar;
    let sigma_beta = estimate_sigma_beta(&fit.residuals, inst, tau_star)?;

    let left = &r_h * &s_gamma * &r_beta;
    let mut cov = &left * &sigma_beta * left.transpose() / t;
    symmetrize(&mut cov);
    let cov = clip_negative(cov);
    Ok(CovarianceEstimate { active, cov, sigma_beta, r_beta, s_gamma, r_h, tau_star, method: CovarianceMethod::Asymptotic })
}

/// Covariance of `phi_H` by `method`.
pub fn covariance(
    fit: &ModelFit,
    inst: &InstrumentPanel,
    design: &DesignMatrices,
    basis: &DynamicBasis,
    tau_star: usize,
    active: Option<&[usize]>,
    method: CovarianceMethod,
) -> Result<CovarianceEstimate> {
    let mut est = covariance_phi(fit, inst, design, basis, tau_star, active)?;
    if method == CovarianceMethod::Sandwich {
        let scores = sandwich_scores(&fit.residuals, inst, design, &est.active)?;
        let mut cov = long_run_sum(&scores, tau_star);
        symmetrize(&mut cov);
        est.cov = clip_negative(cov);
        est.method = method;
    }
    Ok(est)
}

/// Per-period contributions `xi_t` to `phi_H - phi*_H`:
/// `(D_H'D_H)^{-1} D_H' {B'e_t - K G^{-1} Q C_t' e_t}` with `e_t` the residual.
fn sandwich_scores(
    residuals: &DMatrix<f64>,
    inst: &InstrumentPanel,
    design: &DesignMatrices,
    active: &[usize],
) -> Result<DMatrix<f64>> {
    let (d, t_len) = (design.d, design.t_len);
    if residuals.shape() != (d, t_len) {
        return Err(Error::Dimension("residuals do not match the design".into()));
    }
    let dh = design.design.select_columns(active);
    let inv = spd_inverse(&dh.tr_mul(&dh)).map_err(|e| {
        Error::Inference(format!("active design is rank deficient (condition {:.3e})", e.condition))
    })?;
    let projection = dh.tr_mul(&design.x_kron_c) * &design.gram_inv * &design.x_b;
    // column h of D_H, entry i d + k, viewed as a d x d matrix indexed (k, i)
    let reshaped: Vec<DMatrix<f64>> = dh.column_iter().map(|c| DMatrix::from_column_slice(d, d, c.as_slice())).collect();
    let s = 1.0 / ((t_len * d) as f64).sqrt();
    let mut scores = DMatrix::zeros(active.len(), t_len);
    for t in 0..t_len {
        let e = residuals.column(t);
        let c = inst.centered_gamma.column(t);
        let direct = DVector::from_iterator(active.len(), reshaped.iter().map(|m| s * m.tr_mul(&c).dot(&e)));
        let indirect = &projection * inst.centered(t).tr_mul(&e);
        scores.set_column(t, &(&inv * (direct - indirect)));
    }
    Ok(scores)
}

/// `sum_t xi_t xi_t' + sum_{tau=1}^{tau*} sum_t (xi_t xi_{t+tau}' + xi_{t+tau} xi_t')`.
fn long_run_sum(scores: &DMatrix<f64>, tau_star: usize) -> DMatrix<f64> {
    let t_len = scores.ncols();
    let mut out = DMatrix::zeros(scores.nrows(), scores.nrows());
    for tau in 0..=tau_star.min(t_len.saturating_sub(1)) {
        let g = scores.columns(0, t_len - tau) * scores.columns(tau, t_len - tau).transpose();
        if tau == 0 {
            out += g;
        } else {
            out += &g + g.transpose();
        }
    }
    out
}

fn clip_negative(cov: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return cov;
    }
    warn!("plug-in covariance is indefinite; clipping negative eigenvalues to zero");
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Normal quantile for a two-sided interval at `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// A point estimate with its symmetric interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Intervals for every coordinate of `cov.active`.
pub fn coefficient_intervals(fit: &ModelFit, cov: &CovarianceEstimate, level: f64) -> Result<Vec<Interval>> {
    let q = normal_quantile(level)?;
    let se = cov.standard_errors();
    Ok(cov
        .active
        .iter()
        .zip(se.iter())
        .map(|(&i, &s)| {
            let estimate = fit.phi[i];
            Interval { estimate, se: s, lower: estimate - q * s, upper: estimate + q * s }
        })
        .collect())
}

/// `rho_t = z_{t,H}' phi_H` with its interval from the quadratic form `z_H' C z_H`.
pub fn infer_rho(
    fit: &ModelFit,
    cov: &CovarianceEstimate,
    basis: &DynamicBasis,
    t: usize,
    level: f64,
) -> Result<Interval> {
    if t >= basis.t_len() {
        return Err(Error::Index(format!("period {} of {}", t + 1, basis.t_len())));
    }
    let z = DVector::from_iterator(cov.active.len(), cov.active.iter().map(|&i| basis.value(i, t)));
    let phi = DVector::from_iterator(cov.active.len(), cov.active.iter().map(|&i| fit.phi[i]));
    let estimate = z.dot(&phi);
    let variance = z.dot(&(&cov.cov * &z));
    if !(variance > 0.0) {
        return Err(Error::Inference(format!("degenerate variance {variance:.3e} at period {}", t + 1)));
    }
    let se = variance.sqrt();
    let q = normal_quantile(level)?;
    Ok(Interval { estimate, se, lower: estimate - q * se, upper: estimate + q * se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BasisBlock;

    fn panel(t_len: usize) -> InstrumentPanel {
        let blocks = (0..t_len)
            .map(|t| DMatrix::from_fn(2, 3, |i, j| ((i + 2 * j + 3 * t) as f64 * 0.71).sin()))
            .collect();
        InstrumentPanel::from_blocks(blocks).unwrap()
    }

    #[test]
    fn zero_residuals_give_zero_long_run_covariance() {
        let inst = panel(6);
        let s = estimate_sigma_beta(&DMatrix::zeros(2, 6), &inst, 2).unwrap();
        assert_eq!(s.amax(), 0.0);
    }

    #[test]
    fn lag_zero_is_the_sample_second_moment() {
        let inst = panel(5);
        let eps = DMatrix::from_fn(2, 5, |i, t| ((i * 5 + t) as f64).cos());
        let s = estimate_sigma_beta(&eps, &inst, 0).unwrap();
        let mut want = DMatrix::zeros(3, 3);
        for t in 0..5 {
            let c = &inst.blocks[t] - &inst.mean;
            let e = eps.column(t);
            want += c.transpose() * e * e.transpose() * &c;
        }
        want /= 5.0;
        assert!((s - want).amax() < 1e-14);
    }

    #[test]
    fn lagged_terms_by_direct_summation() {
        let inst = panel(7);
        let eps = DMatrix::from_fn(2, 7, |i, t| ((i * 3 + 2 * t) as f64 * 0.4).sin());
        let s = estimate_sigma_beta(&eps, &inst, 2).unwrap();
        let w: Vec<DVector<f64>> = (0..7)
            .map(|t| (&inst.blocks[t] - &inst.mean).transpose() * eps.column(t))
            .collect();
        let mut want = DMatrix::zeros(3, 3);
        for tau in -2i64..=2 {
            for t in 0..7i64 {
                let u = t + tau;
                if (0..7).contains(&u) {
                    want += &w[t as usize] * w[u as usize].transpose();
                }
            }
        }
        want /= 7.0;
        assert!((s - want).amax() < 1e-13);
    }

    #[test]
    fn interval_width_is_linear_in_the_basis() {
        let cov = CovarianceEstimate {
            active: vec![0, 1],
            cov: DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
            sigma_beta: DMatrix::zeros(0, 0),
            r_beta: DMatrix::zeros(0, 0),
            s_gamma: DMatrix::zeros(0, 0),
            r_h: DMatrix::zeros(0, 0),
            tau_star: 0,
            method: CovarianceMethod::Asymptotic,
        };
        let fit = ModelFit {
            phi: DVector::from_column_slice(&[0.2, -0.1]),
            beta: DVector::zeros(1),
            mu: DVector::zeros(1),
            active_set: vec![0, 1],
            lambda: 0.0,
            bic: 0.0,
            rss: 0.0,
            residuals: DMatrix::zeros(1, 1),
            phi_ls: DVector::zeros(2),
            pinned: vec![],
            constraint_scale: 1.0,
            path: vec![],
        };
        let basis = |z: f64| {
            DynamicBasis::new(1, vec![BasisBlock::with_constant(vec![vec![z]])]).unwrap()
        };
        let one = infer_rho(&fit, &cov, &basis(1.0), 0, 0.95).unwrap();
        // z = (1, 1): variance 0.04 + 0.09 + 2 * 0.01
        assert!((one.se - 0.15f64.sqrt()).abs() < 1e-15);
        assert!((one.estimate - 0.1).abs() < 1e-15);
        let q = normal_quantile(0.95).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((one.upper - (0.1 + q * 0.15f64.sqrt())).abs() < 1e-14);

        // constants only: rho is the constant coefficient
        let zero = infer_rho(&fit, &cov, &basis(0.0), 0, 0.95).unwrap();
        assert!((zero.estimate - 0.2).abs() < 1e-15);
        assert!((zero.se - 0.2).abs() < 1e-15);

        let mut cov2 = cov.clone();
        cov2.active = vec![1];
        cov2.cov = DMatrix::from_element(1, 1, 0.09);
        let a = infer_rho(&fit, &cov2, &basis(1.0), 0, 0.95).unwrap();
        let b = infer_rho(&fit, &cov2, &basis(2.0), 0, 0.95).unwrap();
        assert!(((b.upper - b.estimate) - 2.0 * (a.upper - a.estimate)).abs() < 1e-14);
    }

    #[test]
    fn sandwich_scores_sum_to_the_linearized_error() {
        use crate::design::{build_b, build_design, build_instruments};
        use crate::simulation::{presets, simulate};

        let sim = simulate(&presets::general(6, 12)).unwrap();
        let spec = crate::model::ModelSpec::new(sim.weights.clone(), sim.basis.clone());
        let inst = build_instruments(&sim.data, &spec.weights, 1).unwrap();
        let design = build_design(&sim.data, &spec, &inst).unwrap();
        let e = DMatrix::from_fn(6, 12, |i, t| ((7 * i + 3 * t) as f64 * 0.37).sin());
        let active = [0usize, 1, 5];

        let scores = sandwich_scores(&e, &inst, &design, &active).unwrap();
        let total: DVector<f64> = scores.column_sum();

        let dh = design.design.select_columns(&active);
        let inv = dh.tr_mul(&dh).try_inverse().unwrap();
        let mut w = DVector::zeros(inst.v());
        for t in 0..12 {
            w += inst.centered(t).tr_mul(&e.column(t));
        }
        let augmented = build_b(&inst).apply_transpose(&e) - &design.x_kron_c * (&design.gram_inv * &design.x_b * w);
        let want = inv * dh.tr_mul(&augmented);
        assert!((total - &want).amax() < 1e-10 * want.amax().max(1.0));

        let lag0 = long_run_sum(&scores, 0);
        assert!((lag0 - &scores * scores.transpose()).amax() < 1e-14);
    }
}
