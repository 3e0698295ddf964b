use serde::{Deserialize, Serialize};

/// Mean squared difference.
pub fn mse(estimate: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "mse needs equal lengths");
    if truth.is_empty() {
        return 0.0;
    }
    estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64
}

fn share(estimate: &[f64], truth: &[f64], zeros: bool) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "support metrics need equal lengths");
    let (hits, total) = estimate
        .iter()
        .zip(truth)
        .filter(|(_, t)| (**t == 0.0) == zeros)
        .fold((0usize, 0usize), |(h, n), (e, _)| (h + usize::from((*e == 0.0) == zeros), n + 1));
    // vacuous when there is nothing to classify
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Share of true zeros estimated as zero.
pub fn specificity(estimate: &[f64], truth: &[f64]) -> f64 {
    share(estimate, truth, true)
}

/// Share of true nonzeros estimated as nonzero.
pub fn sensitivity(estimate: &[f64], truth: &[f64]) -> f64 {
    share(estimate, truth, false)
}

/// Whether the nonzero coordinates of `estimate` are exactly `support`.
pub fn support_matches(estimate: &[f64], support: &[usize]) -> bool {
    estimate
        .iter()
        .enumerate()
        .all(|(i, v)| (*v != 0.0) == support.contains(&i))
}

/// Per-replication accuracy of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub mse_phi: f64,
    pub mse_beta: f64,
    pub mse_mu: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

impl FitMetrics {
    pub fn new(phi: &[f64], beta: &[f64], mu: &[f64], truth: &super::Truth) -> Self {
        Self {
            mse_phi: mse(phi, &truth.phi),
            mse_beta: mse(beta, &truth.beta),
            mse_mu: mse(mu, &truth.mu),
            specificity: specificity(phi, &truth.phi),
            sensitivity: sensitivity(phi, &truth.phi),
        }
    }

    pub fn named(&self) -> Vec<(String, f64)> {
        vec![
            ("mse_phi".into(), self.mse_phi),
            ("mse_beta".into(), self.mse_beta),
            ("mse_mu".into(), self.mse_mu),
            ("specificity".into(), self.specificity),
            ("sensitivity".into(), self.sensitivity),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_estimate_is_perfect() {
        let t = [0.2, 0.2, 0.0, 0.0, 0.0, 0.3];
        assert_eq!(mse(&t, &t), 0.0);
        assert_eq!(specificity(&t, &t), 1.0);
        assert_eq!(sensitivity(&t, &t), 1.0);
    }

    #[test]
    fn missed_coefficient_counts() {
        let t = [0.2, 0.2, 0.0, 0.0, 0.0, 0.3];
        let e = [0.2, 0.0, 0.0, 0.0, 0.0, 0.3];
        assert!((sensitivity(&e, &t) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(specificity(&e, &t), 1.0);
        assert!((mse(&e, &t) - 0.04 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unique_support() {
        assert!(support_matches(&[0.0, 0.4, 0.0, 0.1], &[1, 3]));
        assert!(!support_matches(&[0.0, 0.4, 0.2, 0.1], &[1, 3]));
        assert!(!support_matches(&[0.0, 0.4, 0.0, 0.0], &[1, 3]));
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(pairs in prop::collection::vec((-2i8..3, -2i8..3), 1..20)) {
            let e: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 2.0).collect();
            let t: Vec<f64> = pairs.iter().map(|p| f64::from(p.1) / 2.0).collect();
            prop_assert!(mse(&e, &t) >= 0.0);
            for v in [specificity(&e, &t), sensitivity(&e, &t)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
