//! Deterministic property checks shared by the property tests and the acceptance report.

use dsar::changepoint::ari;
use dsar::design::{build_b, build_design, build_instruments};
use dsar::estimator::{adaptive_weights, fit, lasso_problem, ls_phi, LassoProblem};
use dsar::model::{ConstraintMode, FitSettings, LambdaGrid, SolverOptions};
use dsar::simulation::{presets, simulate, Analysis, DacSpec, NoiseGen, Study};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{dense, period_major, random_case, unit_major};

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

/// Panel sizes cycling through `d <= 6`, `T <= 10`.
fn shape(seed: u64) -> (usize, usize, usize) {
    (2 + (seed % 5) as usize, 3 + (seed % 8) as usize, 1 + (seed % 2) as usize)
}

/// `max |B'(mu (x) 1_T)|`, factored and dense.
pub fn annihilation_error(seed: u64) -> f64 {
    let (d, t_len, r) = shape(seed);
    let case = random_case(seed, d, t_len, r);
    let inst = build_instruments(&case.data, &case.spec.weights, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
    let panel = DMatrix::from_fn(d, t_len, |i, _| mu[i]);
    let factored = build_b(&inst).apply_transpose(&panel).amax();
    let explicit = (dense(&case).b.transpose() * unit_major(&panel)).amax();
    factored.max(explicit)
}

pub fn annihilation() -> Check {
    let worst = (0..40).map(annihilation_error).fold(0.0, f64::max);
    check("fixed-effect annihilation", worst <= 1e-12, format!("max |B'(mu x 1)| = {worst:.2e} over 40 instances (tol 1e-12)"))
}

/// Largest relative gap between the profiled, simplified and directly assembled residuals.
pub fn objective_gap(seed: u64) -> f64 {
    let (d, t_len, r) = shape(seed);
    let t_len = t_len.max(4);
    let case = random_case(seed, d, t_len, r);
    let inst = build_instruments(&case.data, &case.spec.weights, 1).unwrap();
    let dm = build_design(&case.data, &case.spec, &inst).unwrap();
    let o = dense(&case);
    let l = case.spec.basis.len();
    let mut b_nu = DMatrix::zeros(t_len * d, inst.v());
    let mut x_nu = DMatrix::zeros(t_len * d, r);
    for t in 0..t_len {
        b_nu.view_mut((t * d, 0), (d, inst.v())).copy_from(&inst.centered(t));
        x_nu.view_mut((t * d, 0), (d, r)).copy_from(&case.data.x[t]);
    }
    let xb = x_nu.transpose() * &b_nu;
    let gram_inv = (&xb * xb.transpose()).try_inverse().unwrap();
    let mut worst = 0.0f64;
    for k in 0..3 {
        let phi = DVector::from_fn(l, |i, _| ((i + 2 * k) as f64 * 0.9 + seed as f64).sin() * 0.4);
        let beta = &gram_inv * &xb * b_nu.transpose() * (period_major(&case.data.y) - &o.yw * &phi);
        let direct = o.b.transpose() * (&o.y - &o.v * &phi - &o.xs * &beta);
        let scale = direct.norm().max(1e-12);
        worst = worst
            .max((dm.residual(&phi) - &direct).norm() / scale)
            .max((dm.profiled_residual(&phi) - &direct).norm() / scale);
    }
    worst
}

pub fn objective_equivalence() -> Check {
    let worst = (0..40).map(objective_gap).fold(0.0, f64::max);
    check("objective-form equivalence", worst <= 1e-10, format!("max relative gap {worst:.2e} over 40 instances (tol 1e-10)"))
}

/// A random weighted LASSO problem of size `n`.
pub fn random_lasso(seed: u64, n: usize) -> LassoProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
    let gram = a.transpose() * a;
    let linear = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let p = LassoProblem { gram, linear, weights, lambda: 0.0 };
    let lambda = p.lambda_max() * rng.random_range(0.0..1.2);
    p.with_lambda(lambda)
}

pub fn lasso_kkt(seed: u64, n: usize) -> f64 {
    let p = random_lasso(seed, n);
    let (phi, _) = p.solve(&DVector::zeros(n), &SolverOptions::default());
    p.kkt_residual(&phi)
}

/// KKT residual of the adaptive LASSO built from an actual design.
pub fn design_kkt(seed: u64) -> f64 {
    let (d, t_len, r) = shape(seed);
    let case = random_case(seed, d, t_len.max(5), r);
    let inst = build_instruments(&case.data, &case.spec.weights, 1).unwrap();
    let dm = build_design(&case.data, &case.spec, &inst).unwrap();
    let ls = ls_phi(&dm, &case.spec.basis).unwrap();
    let base = lasso_problem(&dm, adaptive_weights(&ls, &dm.pinned), 0.0);
    let p = base.with_lambda(base.lambda_max() * (seed % 7) as f64 / 6.0);
    let (phi, _) = p.solve(&DVector::zeros(p.len()), &SolverOptions::default());
    p.kkt_residual(&phi)
}

pub fn kkt() -> Check {
    let random = (0..300).map(|s| lasso_kkt(s, 1 + (s % 8) as usize)).fold(0.0, f64::max);
    let designs = (0..40).map(design_kkt).fold(0.0, f64::max);
    let worst = random.max(designs);
    check(
        "adaptive-LASSO KKT residual",
        worst <= 1e-8,
        format!("max residual {worst:.2e} over 300 random and 40 design problems (tol 1e-8)"),
    )
}

/// `max |phi(lambda = 0) - phi_ls|`.
pub fn lambda_zero_gap(seed: u64) -> f64 {
    let (d, t_len, r) = shape(seed);
    let case = random_case(seed, d, t_len.max(5), r);
    let inst = build_instruments(&case.data, &case.spec.weights, 1).unwrap();
    let dm = build_design(&case.data, &case.spec, &inst).unwrap();
    let ls = ls_phi(&dm, &case.spec.basis).unwrap();
    let p = lasso_problem(&dm, adaptive_weights(&ls, &dm.pinned), 0.0);
    let (phi, _) = p.solve(&DVector::zeros(p.len()), &SolverOptions::default());
    (phi - &ls).amax() / ls.amax().max(1.0)
}

pub fn lambda_zero() -> Check {
    let worst = (0..40).map(lambda_zero_gap).fold(0.0, f64::max);
    check("lambda = 0 reduction", worst <= 1e-8, format!("max |phi - phi_ls| = {worst:.2e} over 40 designs (tol 1e-8)"))
}

/// Distance between the solver and a two-stage grid search on an `L = 2` problem.
pub fn grid_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let c = rng.random_range(-0.4..0.4) * f64::sqrt(a * b);
    let p = LassoProblem {
        gram: DMatrix::from_row_slice(2, 2, &[a, c, c, b]),
        linear: DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
        weights: vec![rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)],
        lambda: 0.0,
    };
    let p = p.with_lambda(p.lambda_max() * rng.random_range(0.0..1.1));
    let (phi, _) = p.solve(&DVector::zeros(2), &SolverOptions::default());

    let search = |center: (f64, f64), half: f64, step: f64| {
        let n = (2.0 * half / step).round() as i64;
        let mut best = (f64::INFINITY, center);
        for i in 0..=n {
            for k in 0..=n {
                let x = (center.0 - half + i as f64 * step, center.1 - half + k as f64 * step);
                let v = p.objective(&DVector::from_column_slice(&[x.0, x.1]));
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
        best.1
    };
    let coarse = search((0.0, 0.0), 6.0, 0.01);
    let fine = search(coarse, 0.02, 1e-4);
    (phi[0] - fine.0).abs().max((phi[1] - fine.1).abs())
}

pub fn grid_oracle() -> Check {
    let worst = (0..12).map(grid_gap).fold(0.0, f64::max);
    check("L = 2 grid-search oracle", worst <= 2e-3, format!("max distance {worst:.2e} over 12 problems (tol 2e-3)"))
}

/// Worst coordinate error of an unpenalized fit on noise-free data.
pub fn noiseless_error(d: usize, t_len: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for mut dgp in [presets::general(d, t_len), presets::normality(d, t_len), presets::two_breaks(d, t_len)] {
        dgp.noise = NoiseGen::Iid { sd: 0.0 };
        dgp.seed = seed;
        let sim = simulate(&dgp).unwrap();
        let settings = FitSettings {
            lambda_grid: LambdaGrid::Explicit(vec![0.0]),
            constraint: ConstraintMode::Off,
            ..FitSettings::default()
        };
        let f = fit(&sim.data, &settings.spec(sim.weights.clone(), sim.basis.clone())).unwrap();
        let gap = |est: &DVector<f64>, truth: &[f64]| {
            est.iter().zip(truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        worst = worst.max(gap(&f.phi, &sim.truth.phi)).max(gap(&f.beta, &sim.truth.beta)).max(gap(&f.mu, &sim.truth.mu));
    }
    worst
}

pub fn noiseless_recovery() -> Check {
    let worst = (0..3).map(|s| noiseless_error(20, 80, s)).fold(0.0, f64::max);
    check("noiseless exact recovery", worst <= 1e-6, format!("max |estimate - truth| = {worst:.2e} (tol 1e-6)"))
}

/// Adjusted Rand index from the four pair counts, without a contingency table.
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for k in (i + 1)..n {
            match (a[i] == a[k], b[i] == b[k]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let den = (neither + only_b) * (only_b + both) + (neither + only_a) * (only_a + both);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (neither * both - only_a * only_b) / den
}

fn labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out.into_iter().flat_map(|v| (0..k).map(move |c| [v.clone(), vec![c]].concat())).collect();
    }
    out
}

pub fn ari_brute_force() -> Check {
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    for n in 1..=6 {
        let all = labelings(n, n.min(3));
        for a in &all {
            for b in &all {
                worst = worst.max((ari(a, b) - ari_by_pairs(a, b)).abs());
                pairs += 1;
            }
        }
    }
    check("ARI pair enumeration", worst <= 1e-12, format!("max gap {worst:.2e} over {pairs} labeling pairs"))
}

fn bits(s: &dsar::simulation::MonteCarloSummary) -> Vec<Option<Vec<u64>>> {
    s.per_rep.iter().map(|r| r.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect())).collect()
}

pub fn determinism() -> Check {
    let fit_study = Study { dgp: presets::general(10, 24), analysis: Analysis::Fit { settings: FitSettings::default(), infer: None } };
    let detect_study = Study {
        dgp: presets::two_breaks(12, 40),
        analysis: Analysis::Detect {
            settings: FitSettings::default(),
            candidates: dsar::changepoint::CandidateSpec::BreaksGrid { delta: 5 },
            with_constant: false,
            options: Default::default(),
            dac: Some(DacSpec { subset_size: 3, overlap: 1, aggregation: Default::default() }),
        },
    };
    let mut same = true;
    for study in [&fit_study, &detect_study] {
        let one = study.replicate(6, 1, 42).unwrap();
        let many = study.replicate(6, 4, 42).unwrap();
        same &= bits(&one) == bits(&many);
    }
    let a = simulate(&presets::general(10, 24)).unwrap();
    let b = simulate(&presets::general(10, 24)).unwrap();
    same &= a.data.y.iter().zip(b.data.y.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    check("determinism across workers", same, "fit and divide-and-conquer studies, 1 vs 4 workers; repeated simulation".into())
}

pub fn all() -> Vec<Check> {
    vec![
        annihilation(),
        objective_equivalence(),
        kkt(),
        lambda_zero(),
        grid_oracle(),
        noiseless_recovery(),
        ari_brute_force(),
        determinism(),
    ]
}
