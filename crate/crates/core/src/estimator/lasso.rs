//! Weighted LASSO on a quadratic form, solved by cyclic coordinate descent
//! with an active-set finish when descent stalls.

use nalgebra::{DMatrix, DVector};

use crate::model::SolverOptions;

/// Sweeps between checks that coordinate descent is still worth running.
const STALL_CHECK: usize = 500;

/// `min 1/2 phi'G phi - g'phi + lambda sum_i u_i |phi_i|`.
///
/// An infinite `u_i` pins coordinate `i` at zero.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
}

fn soft_threshold(x: f64, k: f64) -> f64 {
    if x > k {
        x - k
    } else if x < -k {
        x + k
    } else {
        0.0
    }
}

impl LassoProblem {
    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub(crate) fn is_pinned(&self, i: usize) -> bool {
        self.weights[i].is_infinite() || self.gram[(i, i)] <= 0.0
    }

    pub fn objective(&self, phi: &DVector<f64>) -> f64 {
        let quad = 0.5 * phi.dot(&(&self.gram * phi)) - self.linear.dot(phi);
        let penalty: f64 = phi
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| **p != 0.0)
            .map(|(p, u)| u * p.abs())
            .sum();
        quad + self.lambda * penalty
    }

    /// Smallest lambda at which zero solves the problem.
    pub fn lambda_max(&self) -> f64 {
        (0..self.len())
            .filter(|&i| !self.is_pinned(i))
            .map(|i| self.linear[i].abs() / self.weights[i])
            .fold(0.0, f64::max)
    }

    /// Largest violation of the optimality conditions at `phi`.
    pub fn kkt_residual(&self, phi: &DVector<f64>) -> f64 {
        let grad = &self.gram * phi - &self.linear;
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            if self.is_pinned(i) {
                if phi[i] != 0.0 {
                    return f64::INFINITY;
                }
                continue;
            }
            let bound = self.lambda * self.weights[i];
            let v = if phi[i] != 0.0 {
                (grad[i] + bound * phi[i].signum()).abs()
            } else {
                (grad[i].abs() - bound).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Coordinate descent from `start`. Returns the solution and the sweep count.
    pub fn solve(&self, start: &DVector<f64>, opts: &SolverOptions) -> (DVector<f64>, usize) {
        let n = self.len();
        let mut phi = start.clone();
        for i in 0..n {
            if self.is_pinned(i) {
                phi[i] = 0.0;
            }
        }
        // running gradient of the smooth part: G phi - g
        let mut grad = &self.gram * &phi - &self.linear;
        let mut sweeps = 0;
        let mut last_pattern: Option<Vec<i8>> = None;
        let mut next_polish = 0;
        while sweeps < opts.max_sweeps {
            sweeps += 1;
            #[cfg(debug_assertions)]
            let before = self.objective(&phi);
            let mut largest = 0.0f64;
            for i in 0..n {
                if self.is_pinned(i) {
                    continue;
                }
                let gii = self.gram[(i, i)];
                let partial = gii * phi[i] - grad[i];
                let next = soft_threshold(partial, self.lambda * self.weights[i]) / gii;
                let step = next - phi[i];
                if step != 0.0 {
                    grad.axpy(step, &self.gram.column(i), 1.0);
                    phi[i] = next;
                    largest = largest.max(step.abs());
                }
            }
            #[cfg(debug_assertions)]
            {
                let after = self.objective(&phi);
                debug_assert!(
                    after <= before + 1e-9 * before.abs().max(1.0),
                    "coordinate descent increased the objective"
                );
            }
            if largest < opts.tolerance {
                break;
            }
            // Coordinate descent crawls on ill-conditioned problems; once the
            // sign pattern holds for a sweep, try the exact minimizer on it.
            let pattern: Vec<i8> = phi.iter().map(|v| v.signum() as i8 * i8::from(*v != 0.0)).collect();
            if last_pattern.as_ref() == Some(&pattern) && sweeps >= next_polish {
                next_polish = sweeps + 10;
                if let Some(better) = self.polish(&phi) {
                    phi = better;
                    grad = &self.gram * &phi - &self.linear;
                }
            }
            last_pattern = Some(pattern);
            if sweeps % STALL_CHECK == 0 && self.kkt_residual(&phi) > self.finish_tolerance() {
                break;
            }
        }
        if self.kkt_residual(&phi) > self.finish_tolerance() {
            let finished = self.feature_sign(&phi);
            if self.objective(&finished) <= self.objective(&phi) {
                phi = finished;
            }
        }
        (phi, sweeps)
    }

    fn finish_tolerance(&self) -> f64 {
        1e-10 * self.linear.amax().max(1.0)
    }

    /// Feature-sign search from `start`: repeatedly minimize over the current
    /// support with fixed signs, stepping to the best sign change on the way.
    /// Exact and finite for a positive definite Gram matrix.
    fn feature_sign(&self, start: &DVector<f64>) -> DVector<f64> {
        let n = self.len();
        let bound = |i: usize| self.lambda * self.weights[i];
        let mut x = start.clone();
        for i in 0..n {
            if self.is_pinned(i) {
                x[i] = 0.0;
            }
        }
        // a support re-solve that cannot improve counts as settled
        let mut stuck = false;
        for _ in 0..(20 * n + 20) {
            let grad = &self.gram * &x - &self.linear;
            let tol = 1e-12 * (self.linear.amax() + self.gram.amax() * x.amax()).max(1.0);
            let mut signs: Vec<(usize, f64)> = (0..n).filter(|&i| x[i] != 0.0).map(|i| (i, x[i].signum())).collect();
            let settled = stuck || signs.iter().all(|&(i, s)| (grad[i] + bound(i) * s).abs() <= tol);
            stuck = false;
            if settled {
                let entering = (0..n)
                    .filter(|&i| x[i] == 0.0 && !self.is_pinned(i))
                    .map(|i| (i, grad[i].abs() - bound(i)))
                    .filter(|&(_, v)| v > tol)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                let Some((i, _)) = entering else { return x };
                signs.push((i, -grad[i].signum()));
                signs.sort_unstable_by_key(|&(i, _)| i);
            }
            let support: Vec<usize> = signs.iter().map(|&(i, _)| i).collect();
            let g = self.gram.select_rows(&support).select_columns(&support);
            let rhs = DVector::from_iterator(
                support.len(),
                signs.iter().map(|&(i, s)| self.linear[i] - bound(i) * s),
            );
            let Some(chol) = g.cholesky() else { return x };
            let target = chol.solve(&rhs);

            // candidates: the target and every point where a current coefficient reaches zero
            let mut best = x.clone();
            let mut best_value = self.objective(&x);
            let mut steps = vec![(1.0, None)];
            for (k, &i) in support.iter().enumerate() {
                if x[i] != 0.0 && target[k].signum() != x[i].signum() {
                    steps.push((x[i] / (x[i] - target[k]), Some(i)));
                }
            }
            for (t, zeroed) in steps {
                let mut y = x.clone();
                for (k, &i) in support.iter().enumerate() {
                    y[i] = x[i] + t * (target[k] - x[i]);
                }
                if let Some(i) = zeroed {
                    y[i] = 0.0;
                }
                let value = self.objective(&y);
                if value < best_value {
                    best = y;
                    best_value = value;
                }
            }
            if best == x {
                if settled {
                    return x;
                }
                stuck = true;
                continue;
            }
            x = best;
        }
        x
    }

    /// Minimizer over the support of `phi` with its signs held fixed, if it
    /// keeps those signs and does not raise the objective.
    fn polish(&self, phi: &DVector<f64>) -> Option<DVector<f64>> {
        let support: Vec<usize> = (0..self.len()).filter(|&i| phi[i] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let g = self.gram.select_rows(&support).select_columns(&support);
        let rhs = DVector::from_iterator(
            support.len(),
            support.iter().map(|&i| self.linear[i] - self.lambda * self.weights[i] * phi[i].signum()),
        );
        let sol = g.cholesky()?.solve(&rhs);
        let mut out = DVector::zeros(self.len());
        for (v, &i) in sol.iter().zip(&support) {
            if !v.is_finite() || v.signum() != phi[i].signum() || *v == 0.0 {
                return None;
            }
            out[i] = *v;
        }
        (self.objective(&out) <= self.objective(phi)).then_some(out)
    }
}
