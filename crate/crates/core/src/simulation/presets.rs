//! Ready-made processes for the standard experiments.

use super::{
    Covariates, Cut, DgpSpec, Driver, Dynamics, Endogeneity, IndicatorBlock, NoiseGen, NormalBlock,
    StationarityPolicy, WeightGen,
};

fn standard_weights() -> Vec<WeightGen> {
    vec![WeightGen::AheadBehind { k: 2 }, WeightGen::Bernoulli { p: 0.2, symmetric: false }]
}

fn endogenous_covariates() -> Covariates {
    Covariates { r: 3, endogenous: Some(Endogeneity { column: 2, m: 0.5 }) }
}

fn two_normal_terms_each() -> Dynamics {
    let b = NormalBlock { constant: true, terms: 2 };
    Dynamics::Normal { blocks: vec![b.clone(), b] }
}

fn base(d: usize, t_len: usize, dynamics: Dynamics, phi: Vec<f64>) -> DgpSpec {
    DgpSpec {
        d,
        t_len,
        weights: standard_weights(),
        dynamics,
        phi,
        mu: vec![1.0],
        beta: vec![1.0; 3],
        covariates: endogenous_covariates(),
        noise: NoiseGen::SparseCorrelated { offdiag: 0.1, prob: 0.2 },
        stationarity: StationarityPolicy::Redraw,
        seed: 0,
    }
}

/// Two matrices, two normal dynamic variables each, sparse coefficients
/// `(0.2, 0.2, 0, 0, 0, 0.3)`, one endogenous covariate.
pub fn general(d: usize, t_len: usize) -> DgpSpec {
    base(d, t_len, two_normal_terms_each(), vec![0.2, 0.2, 0.0, 0.0, 0.0, 0.3])
}

/// The general layout with coefficients `(0, 0.2, 0, 0, 0.2, 0)`.
pub fn tuning(d: usize, t_len: usize) -> DgpSpec {
    base(d, t_len, two_normal_terms_each(), vec![0.0, 0.2, 0.0, 0.0, 0.2, 0.0])
}

/// Exogenous covariates, iid noise, coefficients `(0, -0.5, 0.5, 0, 0, 0)`.
pub fn normality(d: usize, t_len: usize) -> DgpSpec {
    DgpSpec {
        covariates: Covariates { r: 3, endogenous: None },
        noise: NoiseGen::Iid { sd: 1.0 },
        ..base(d, t_len, two_normal_terms_each(), vec![0.0, -0.5, 0.5, 0.0, 0.0, 0.0])
    }
}

fn cut(at: f64, above: bool) -> Cut {
    Cut { cut: at, above }
}

fn without_constant(terms: Vec<Cut>) -> IndicatorBlock {
    IndicatorBlock { constant: false, terms }
}

/// `strength * W_1` up to period 30, `strength * W_2` afterwards.
pub fn single_break(d: usize, t_len: usize, strength: f64, noise: NoiseGen) -> DgpSpec {
    let dynamics = Dynamics::Indicators {
        driver: Driver::Time,
        blocks: vec![without_constant(vec![cut(30.0, false)]), without_constant(vec![cut(30.0, true)])],
    };
    DgpSpec { noise, ..base(d, t_len, dynamics, vec![strength, strength]) }
}

/// `W_t = 0.8 1{t<=30} W_1 - 0.9 1{t<=60} W_1 - 0.9 1{t>60} W_2`.
pub fn two_breaks(d: usize, t_len: usize) -> DgpSpec {
    let dynamics = Dynamics::Indicators {
        driver: Driver::Time,
        blocks: vec![
            without_constant(vec![cut(30.0, false), cut(60.0, false)]),
            without_constant(vec![cut(60.0, true)]),
        ],
    };
    base(d, t_len, dynamics, vec![0.8, -0.9, -0.9])
}

/// `W_t = -0.9 W_1` throughout.
pub fn no_change(d: usize, t_len: usize) -> DgpSpec {
    let dynamics = Dynamics::Indicators {
        driver: Driver::Time,
        blocks: vec![IndicatorBlock { constant: true, terms: vec![] }, without_constant(vec![])],
    };
    base(d, t_len, dynamics, vec![-0.9])
}

fn threshold(d: usize, t_len: usize, driver: Driver, gamma: f64) -> DgpSpec {
    let dynamics = Dynamics::Indicators {
        driver,
        blocks: vec![without_constant(vec![cut(gamma, false)]), without_constant(vec![cut(gamma, true)])],
    };
    base(d, t_len, dynamics, vec![0.3, 0.8])
}

/// `0.3 W_1` when an AR(5) driver is at most 0.3, `0.8 W_2` otherwise.
pub fn threshold_ar(d: usize, t_len: usize) -> DgpSpec {
    threshold(d, t_len, Driver::Ar { coefs: vec![0.3, 0.2, 0.1, 0.05, 0.05], burn_in: 200 }, 0.3)
}

/// Regimes switched by the previous period's cross-sectional mean at 1.5.
pub fn threshold_self_exciting(d: usize, t_len: usize) -> DgpSpec {
    threshold(d, t_len, Driver::SelfExciting { lag: 1 }, 1.5)
}

/// Look a preset up by name with the given dimensions.
pub fn by_name(name: &str, d: usize, t_len: usize) -> Option<DgpSpec> {
    Some(match name {
        "general" => general(d, t_len),
        "tuning" => tuning(d, t_len),
        "normality" => normality(d, t_len),
        "single_break" => single_break(d, t_len, 0.5, NoiseGen::Iid { sd: 1.0 }),
        "single_break_weak" => single_break(d, t_len, 0.3, NoiseGen::Iid { sd: 1.0 }),
        "single_break_t6" => single_break(d, t_len, 0.5, NoiseGen::StudentT { df: 6.0 }),
        "two_breaks" => two_breaks(d, t_len),
        "no_change" => no_change(d, t_len),
        "threshold_ar" => threshold_ar(d, t_len),
        "threshold_self_exciting" => threshold_self_exciting(d, t_len),
        _ => return None,
    })
}

pub const NAMES: [&str; 10] = [
    "general",
    "tuning",
    "normality",
    "single_break",
    "single_break_weak",
    "single_break_t6",
    "two_breaks",
    "no_change",
    "threshold_ar",
    "threshold_self_exciting",
];
