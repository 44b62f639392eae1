//! Hungarian method (shortest augmenting paths with potentials) for
//! rectangular assignment problems.

use ndarray::ArrayView2;

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
///
/// Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: ArrayView2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m, "more rows ({n}) than columns ({m})");
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = col0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    col1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn total(cost: &Array2<f64>, a: &[usize]) -> f64 {
        a.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
    }

    /// Exhaustive search over injective maps rows -> columns.
    fn brute_force(cost: &Array2<f64>) -> f64 {
        fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.nrows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, acc + cost[[row, j]], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
        best
    }

    #[test]
    fn small_known_case() {
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let a = min_cost_assignment(c.view());
        assert_eq!(total(&c, &a), 5.0);
    }

    #[test]
    fn identity_costs_pick_diagonal() {
        let c = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { -1.0 } else { 0.0 });
        assert_eq!(min_cost_assignment(c.view()), vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..5, extra in 0usize..3, vals in prop::collection::vec(-10.0f64..10.0, 42)) {
            let m = n + extra;
            let c = Array2::from_shape_fn((n, m), |(i, j)| vals[i * m + j]);
            let a = min_cost_assignment(c.view());
            let mut seen = a.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            prop_assert!(a.iter().all(|&j| j < m));
            prop_assert!((total(&c, &a) - brute_force(&c)).abs() < 1e-9);
        }
    }
}
