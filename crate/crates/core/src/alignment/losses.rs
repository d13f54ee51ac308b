//! Cosine similarity, symmetric InfoNCE and the token-similarity MSE, each
//! with an explicit gradient.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-wise unit vectors and the original norms.
pub fn l2_normalize_rows(a: &Array2<f64>, what: &'static str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = a.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(row) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::ZeroNorm { what, row });
    }
    let u = a / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Gradient through `u = a / ‖a‖` for every row.
pub fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut da = du.clone();
    for i in 0..u.nrows() {
        let ui = u.row(i);
        let proj = ui.dot(&du.row(i));
        let mut row = da.row_mut(i);
        row.scaled_add(-proj, &ui);
        row /= norms[i];
    }
    da
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// `(i, j) ↦ cos(aᵢ, bⱼ)`.
pub fn cosine_sim_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            expected: format!("{} columns", a.ncols()),
            actual: format!("{} columns", b.ncols()),
        });
    }
    let (ua, _) = l2_normalize_rows(a, "left operand")?;
    let (ub, _) = l2_normalize_rows(b, "right operand")?;
    Ok(ua.dot(&ub.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/τ`: the mean of
/// the image→text and text→image cross-entropies with diagonal targets.
pub fn contrastive_loss(v: &Array2<f64>, t: &Array2<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(contrastive_with_grad(v, t, (1.0 / tau).ln())?.loss)
}

#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub dv: Array2<f64>,
    pub dt: Array2<f64>,
    /// Derivative with respect to `ln(1/τ)`.
    pub dlog_scale: f64,
}

pub fn contrastive_with_grad(v: &Array2<f64>, t: &Array2<f64>, log_scale: f64) -> Result<ContrastiveGrad> {
    check_pair(v, t)?;
    let n = v.nrows();
    let nf = n as f64;
    let scale = log_scale.exp();
    let (u, un) = l2_normalize_rows(v, "image embeddings")?;
    let (w, wn) = l2_normalize_rows(t, "text embeddings")?;
    let logits = u.dot(&w.t()) * scale;
    let lr = log_softmax_rows(&logits);
    let lc = log_softmax_rows(&logits.t().to_owned());
    let mut loss_r = 0.0;
    let mut loss_c = 0.0;
    for i in 0..n {
        loss_r -= lr[[i, i]];
        loss_c -= lc[[i, i]];
    }
    let loss = 0.5 * (loss_r + loss_c) / nf;

    // ∂loss/∂logits = ½[(softmax_rows − I) + (softmax_cols − I)] / n
    let mut dlogits = lr.mapv(f64::exp) + &lc.mapv(f64::exp).t();
    for i in 0..n {
        dlogits[[i, i]] -= 2.0;
    }
    dlogits *= 0.5 / nf;
    let dlog_scale = (&dlogits * &logits).sum();
    let dcos = dlogits * scale;
    let du = dcos.dot(&w);
    let dw = dcos.t().dot(&u);
    Ok(ContrastiveGrad {
        loss,
        dv: normalize_backward(&u, &un, &du),
        dt: normalize_backward(&w, &wn, &dw),
        dlog_scale,
    })
}

/// Reduction of the similarity-to-identity MSE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TslReduction {
    /// Mean over every entry; off-diagonal similarities are pulled to zero.
    #[default]
    Full,
    /// Mean over the diagonal only.
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct SimMse {
    pub loss: f64,
    pub d_pred: Array2<f64>,
    pub d_target: Array2<f64>,
}

/// MSE between `sim(pred, target)` and the identity matrix.
///
/// Row `p` is scaled by `weights[p]`, and the sum is divided by
/// `n_groups` (the number of records the rows came from). With unit
/// weights and one row per record this is the plain mean over all `P²`
/// entries (or over the `P` diagonal entries).
pub fn similarity_mse(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    weights: &[f64],
    n_groups: usize,
    reduction: TslReduction,
) -> Result<SimMse> {
    check_pair(pred, target)?;
    let p = pred.nrows();
    if weights.len() != p || n_groups == 0 {
        return Err(Error::InvalidInput("pair weights do not match the batch".into()));
    }
    let (u, un) = l2_normalize_rows(pred, "projected tokens")?;
    let (w, wn) = l2_normalize_rows(target, "local embeddings")?;
    let sim = u.dot(&w.t());
    let g = n_groups as f64;
    let mut loss = 0.0;
    let mut dsim = Array2::zeros((p, p));
    match reduction {
        TslReduction::Full => {
            let norm = g * p as f64;
            for i in 0..p {
                for j in 0..p {
                    let e = sim[[i, j]] - if i == j { 1.0 } else { 0.0 };
                    loss += weights[i] * e * e / norm;
                    dsim[[i, j]] = 2.0 * weights[i] * e / norm;
                }
            }
        }
        TslReduction::Diagonal => {
            for i in 0..p {
                let e = sim[[i, i]] - 1.0;
                loss += weights[i] * e * e / g;
                dsim[[i, i]] = 2.0 * weights[i] * e / g;
            }
        }
    }
    let du = dsim.dot(&w);
    let dw = dsim.t().dot(&u);
    Ok(SimMse {
        loss,
        d_pred: normalize_backward(&u, &un, &du),
        d_target: normalize_backward(&w, &wn, &dw),
    })
}

/// Token-similarity loss with identity targets and mean over all `n²`
/// entries, for a batch of one pair per record.
pub fn tsl_loss(
    p_hat: &Array2<f64>,
    v_cls: &Array2<f64>,
    s_hat: &Array2<f64>,
    t_cls: &Array2<f64>,
) -> Result<f64> {
    check_pair(p_hat, s_hat)?;
    let n = p_hat.nrows();
    let ones = vec![1.0; n];
    let vis = similarity_mse(p_hat, v_cls, &ones, n, TslReduction::Full)?;
    let txt = similarity_mse(s_hat, t_cls, &ones, n, TslReduction::Full)?;
    Ok(vis.loss + txt.loss)
}
