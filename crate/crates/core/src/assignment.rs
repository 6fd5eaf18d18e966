//! Dense Hungarian algorithm for rectangular maximum-weight assignment.

use ndarray::Array2;

/// Maximum-weight assignment of `min(M, N)` rows to distinct columns.
///
/// Returns, for every row, the assigned column (or `None` when the row is
/// left over because `M > N`). Runs the O(n^3) shortest augmenting path
/// variant on the square matrix padded with zeros, which does not change the
/// optimal real pairs since every full assignment uses the same number of
/// padding cells.
pub fn maximum_weight_assignment(weights: &Array2<f64>) -> Vec<Option<usize>> {
    let (m, n) = weights.dim();
    let size = m.max(n);
    if size == 0 || m == 0 {
        return vec![None; m];
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < m && j < n {
            -weights[[i, j]]
        } else {
            0.0
        }
    };

    // 1-based potentials and matching, index 0 is the virtual root.
    let mut u = vec![0.0f64; size + 1];
    let mut v = vec![0.0f64; size + 1];
    let mut row_of_col = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];

    for i in 1..=size {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result = vec![None; m];
    for j in 1..=size {
        let i = row_of_col[j];
        if i >= 1 && i <= m && j <= n {
            result[i - 1] = Some(j - 1);
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total(w: &Array2<f64>, a: &[Option<usize>]) -> f64 {
        a.iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| w[[i, j]]))
            .sum()
    }

    /// Best value over every injective map from the smaller side.
    fn brute_force(w: &Array2<f64>) -> f64 {
        fn go(
            w: &Array2<f64>,
            row: usize,
            used: &mut Vec<bool>,
            acc: f64,
            best: &mut f64,
            need: usize,
            taken: usize,
        ) {
            let (m, n) = w.dim();
            if row == m {
                if taken == need {
                    *best = best.max(acc);
                }
                return;
            }
            if m - row > need - taken {
                go(w, row + 1, used, acc, best, need, taken);
            }
            if taken < need {
                for j in 0..n {
                    if !used[j] {
                        used[j] = true;
                        go(w, row + 1, used, acc + w[[row, j]], best, need, taken + 1);
                        used[j] = false;
                    }
                }
            }
        }
        let (m, n) = w.dim();
        let mut best = f64::NEG_INFINITY;
        go(w, 0, &mut vec![false; n], 0.0, &mut best, m.min(n), 0);
        best
    }

    #[test]
    fn picks_diagonal() {
        let w = array![[1.0, -1.0], [-1.0, 1.0]];
        assert_eq!(maximum_weight_assignment(&w), vec![Some(0), Some(1)]);
    }

    #[test]
    fn empty_inputs() {
        assert!(maximum_weight_assignment(&Array2::zeros((0, 3))).is_empty());
        assert_eq!(
            maximum_weight_assignment(&Array2::zeros((2, 0))),
            vec![None, None]
        );
    }

    #[test]
    fn matches_brute_force_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let m = rng.random_range(1..6);
            let n = rng.random_range(1..6);
            let w = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0));
            let a = maximum_weight_assignment(&w);
            assert_eq!(a.iter().flatten().count(), m.min(n));
            let mut cols: Vec<usize> = a.iter().flatten().copied().collect();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(cols.len(), m.min(n));
            assert!((total(&w, &a) - brute_force(&w)).abs() < 1e-9);
        }
    }
}
