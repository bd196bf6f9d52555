//! Optimal assignment on dense square weight matrices (Hungarian method with
//! potentials, O(n^3)).

/// Returns `perm` maximising `sum_i weights[i][perm[i]]`, and that sum.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = weights.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let max = weights
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let cost: Vec<Vec<f64>> = weights
        .iter()
        .map(|row| row.iter().map(|w| max - w).collect())
        .collect();
    let perm = min_cost_assignment(&cost);
    let total = perm.iter().enumerate().map(|(i, &j)| weights[i][j]).sum();
    (perm, total)
}

/// Row-to-column assignment minimising total cost.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            perm[owner[j] - 1] = j - 1;
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(w: &[Vec<f64>]) -> f64 {
        fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == w.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..w.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row][j] + go(w, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(w, 0, &mut vec![false; w.len()])
    }

    #[test]
    fn picks_off_diagonal_optimum() {
        let w = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let (perm, total) = max_weight_assignment(&w);
        assert_eq!(perm, vec![1, 0]);
        assert!((total - 1.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(n in 1usize..=6, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::chacha(seed);
            let w: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
                .collect();
            let (perm, total) = max_weight_assignment(&w);
            let mut seen = perm.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!((total - brute_force(&w)).abs() < 1e-12);
        }
    }
}
