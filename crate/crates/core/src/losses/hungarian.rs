//! Minimum-cost one-to-one assignment (shortest augmenting paths with
//! potentials, `O(G² I)`).

use crate::error::{bail, Result};

/// Row-major `rows × cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "cost matrix {rows}x{cols} given {} entries", data.len());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Total cost of an assignment.
    pub fn cost_of(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Assigns every column to a distinct row minimizing total cost. Returns
/// `(row, col)` pairs sorted by row.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    let (n_rows, n_cols) = (cost.rows, cost.cols);
    if n_cols > n_rows {
        bail!(InvalidInput, "{n_cols} targets cannot be matched to {n_rows} predictions");
    }
    if let Some(v) = cost.data.iter().find(|v| !v.is_finite()) {
        bail!(InvalidInput, "non-finite matching cost {v}");
    }
    if n_cols == 0 {
        return Ok(Vec::new());
    }
    // Columns (targets) are the "workers" being inserted one at a time;
    // rows (predictions) are the "jobs". Index 0 is a sentinel.
    let (n, m) = (n_cols, n_rows);
    let a = |w: usize, j: usize| cost.get(j - 1, w - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective column-to-row maps.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if col == cost.cols {
                *best = best.min(acc);
                return;
            }
            for r in 0..cost.rows {
                if !used[r] {
                    used[r] = true;
                    rec(cost, col + 1, used, acc + cost.get(r, col), best);
                    used[r] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.rows], 0.0, &mut best);
        best
    }

    fn is_valid(pairs: &[(usize, usize)], cost: &CostMatrix) -> bool {
        let mut rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        rows.len() == cost.cols && cols.len() == cost.cols && cols.iter().all(|&c| c < cost.cols)
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m, vec![(0, 0), (1, 1)]);
        assert_eq!(c.cost_of(&m), 2.0);
    }

    #[test]
    fn diagonal_matrix_gives_identity() {
        let c = CostMatrix::from_fn(4, 4, |r, k| if r == k { 0.0 } else { 1.0 });
        assert_eq!(hungarian_match(&c).unwrap(), (0..4).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn more_targets_than_predictions_is_rejected() {
        let c = CostMatrix::from_fn(2, 3, |_, _| 0.0);
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn non_finite_costs_are_rejected() {
        let c = CostMatrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn empty_target_set() {
        let c = CostMatrix::from_fn(3, 0, |_, _| 0.0);
        assert!(hungarian_match(&c).unwrap().is_empty());
    }

    #[test]
    fn random_six_by_six_equals_exhaustive_minimum() {
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CostMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let m = hungarian_match(&c).unwrap();
            assert!(is_valid(&m, &c));
            assert!((c.cost_of(&m) - brute_force(&c)).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_under_ties() {
        let c = CostMatrix::from_fn(4, 2, |_, _| 1.0);
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a, hungarian_match(&c).unwrap());
        assert!(is_valid(&a, &c));
    }

    proptest! {
        #[test]
        fn matches_exhaustive_minimum(rows in 1usize..=7, cols_frac in 0.0f64..=1.0, seed in any::<u64>(), integer in any::<bool>()) {
            let cols = ((rows as f64) * cols_frac).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CostMatrix::from_fn(rows, cols, |_, _| {
                if integer { rng.random_range(0..4) as f64 } else { rng.random_range(-5.0..5.0) }
            });
            let m = hungarian_match(&c).unwrap();
            prop_assert!(is_valid(&m, &c));
            prop_assert!((c.cost_of(&m) - brute_force(&c)).abs() < 1e-9);
        }
    }
}
