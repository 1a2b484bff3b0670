//! Two-component principal component projection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{bail, Result};

/// Projects `rows` (all the same length) onto their two leading principal
/// axes after centering. Each axis is oriented so that its largest-magnitude
/// loading is positive, which makes the output independent of the
/// eigensolver's sign choice.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        bail!(Shape, "rows must share a positive dimension");
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (c, axis) in axes.iter().enumerate() {
                p[c] = (0..d).map(|j| centered[(i, j)] * axis[j]).sum();
            }
            p
        })
        .collect())
}
