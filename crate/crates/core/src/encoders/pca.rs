//! Principal-component projection of token matrices for heat maps.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPca {
    /// `N × k`, each column min-max scaled to `[0, 1]`.
    pub map: Array2<f64>,
    /// Fraction of total variance captured by each of the `k` components.
    pub energies: Vec<f64>,
    /// Fewer than `k` components carried variance; the rest are zero.
    pub degenerate: bool,
}

/// Relative eigenvalue floor below which a component counts as absent.
const RANK_TOL: f64 = 1e-10;

pub fn attention_pca(tokens: &Array2<f64>, k: usize) -> Result<TokenPca> {
    let (n, d) = tokens.dim();
    if k == 0 || n <= k {
        return Err(Error::InvalidInput(format!(
            "need more tokens ({n}) than components ({k})"
        )));
    }
    let mean = tokens.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = tokens - &mean;
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let largest = eig.eigenvalues[order[0]].max(0.0);
    // variance indistinguishable from rounding noise on the raw values
    let floor = 1e-20 * tokens.iter().map(|v| v * v).sum::<f64>() / n as f64;

    let mut map = Array2::zeros((n, k));
    let mut energies = vec![0.0; k];
    let mut degenerate = false;
    for (c, &idx) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if total <= floor || lambda <= floor || lambda <= RANK_TOL * largest {
            degenerate = true;
            continue;
        }
        energies[c] = lambda / total;
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iter().cloned().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        let proj: Vec<f64> = (0..n).map(|i| x.row(i).dot(&v.transpose())).collect();
        let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for (i, p) in proj.iter().enumerate() {
            map[[i, c]] = if range > 0.0 { (p - lo) / range } else { 0.0 };
        }
    }
    if total <= floor {
        degenerate = true;
        map.fill(0.0);
    }
    Ok(TokenPca {
        map,
        energies,
        degenerate,
    })
}
