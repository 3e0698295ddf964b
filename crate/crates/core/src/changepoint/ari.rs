use std::collections::HashMap;

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Two trivial partitions that agree score 1.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return if index == max { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pair enumeration: agreements of "same cluster" over all unordered pairs.
    fn brute_force(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                total += 1.0;
                if sa {
                    in_a += 1.0;
                }
                if sb {
                    in_b += 1.0;
                }
                if sa && sb {
                    both += 1.0;
                }
            }
        }
        if total == 0.0 {
            return 1.0;
        }
        let expected = in_a * in_b / total;
        let max = 0.5 * (in_a + in_b);
        if max == expected {
            return if both == max { 1.0 } else { 0.0 };
        }
        (both - expected) / (max - expected)
    }

    fn all_labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|v| {
                    (0..k).map(move |l| {
                        let mut w = v.clone();
                        w.push(l);
                        w
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn identical_and_permuted_labels() {
        assert_eq!(ari(&[1, 1, 2, 2], &[1, 1, 2, 2]), 1.0);
        assert_eq!(ari(&[1, 1, 2, 2], &[2, 2, 1, 1]), 1.0);
    }

    #[test]
    fn crossed_partition_by_hand() {
        // pairs: (12)(13)(14)(23)(24)(34); a joins 12, 34; b joins 13, 24
        // index 0, expected 2*2/6, max 2 -> (0 - 2/3)/(2 - 2/3) = -1/2
        assert!((ari(&[1, 1, 2, 2], &[1, 2, 1, 2]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_pair_enumeration_up_to_six_items() {
        for n in 1..=6 {
            let labelings = all_labelings(n, 3.min(n));
            for a in &labelings {
                for b in &labelings {
                    let x = ari(a, b);
                    let y = brute_force(a, b);
                    assert!((x - y).abs() < 1e-12, "{a:?} {b:?}: {x} vs {y}");
                    assert!((x - ari(b, a)).abs() < 1e-12);
                }
            }
        }
    }
}
