//! Token selection, pooling, projection heads and the training objective
//!
//! `total = λ_global·L_global + λ_local·L_local + λ_tsl·L_tsl`
//!
//! where the two contrastive terms are symmetric InfoNCE over global and
//! local CLS pairs, and `L_tsl` pulls pooled-and-projected global tokens
//! toward the local CLS embeddings of the matched region and sentence.

mod losses;
mod projection;
mod selection;

pub use losses::{
    contrastive_loss, contrastive_with_grad, cosine_sim_matrix, l2_normalize_rows, normalize_backward,
    similarity_mse, tsl_loss, ContrastiveGrad, SimMse, TslReduction,
};
pub use projection::{project, Head, HeadCache, Modality, ProjectionHeads, ProjectionKind};
pub use selection::{
    pool_mean, select_patch_indices, select_patch_indices_with, select_token_indices, PatchIndexSet,
    PatchRule, TokenIndexSet,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::params::Params;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub global: f64,
    pub local: f64,
    pub tsl: f64,
    /// Initial softmax temperature of both contrastive terms.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            global: 1.0,
            local: 0.5,
            tsl: 1.0,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("global", self.global), ("local", self.local), ("tsl", self.tsl)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("λ_{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn needs_local(&self) -> bool {
        self.local > 0.0 || self.tsl > 0.0
    }
}

/// Raw loss components and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub local: f64,
    pub tsl: f64,
    pub total: f64,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lambda_tsl: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.global.is_finite() && self.local.is_finite() && self.tsl.is_finite() && self.total.is_finite()
    }
}

/// Per-batch tensors the objective consumes. Local rows are indexed by
/// pair; a record may own several pairs.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    /// `n × d` global image CLS.
    pub global_image: &'a Array2<f64>,
    /// `n × d` global caption CLS.
    pub global_text: &'a Array2<f64>,
    /// Local tensors; absent when neither local term is active.
    pub local: Option<LocalInputs<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalInputs<'a> {
    /// `P × d` CLS of each local crop.
    pub image_cls: &'a Array2<f64>,
    /// `P × d` CLS of each local sentence.
    pub text_cls: &'a Array2<f64>,
    /// `P × d` mean of the global patch tokens inside each pair's box.
    pub pooled_patches: &'a Array2<f64>,
    /// `P × d` mean of the global sequence tokens of each pair's sentence.
    pub pooled_tokens: &'a Array2<f64>,
    /// Per-pair weights; each record's weights sum to one.
    pub weights: &'a [f64],
    /// For each record, the pair used by the local contrastive term.
    pub primary: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub reduction: TslReduction,
    /// Treat local CLS embeddings as constants inside the token-similarity
    /// term.
    pub stop_grad_targets: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            weights: LossWeights::default(),
            reduction: TslReduction::Full,
            stop_grad_targets: true,
        }
    }
}

/// Gradients of the weighted total with respect to every input.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub global_image: Array2<f64>,
    pub global_text: Array2<f64>,
    pub local_image: Option<Array2<f64>>,
    pub local_text: Option<Array2<f64>>,
    pub pooled_patches: Option<Array2<f64>>,
    pub pooled_tokens: Option<Array2<f64>>,
    pub heads: ProjectionHeads,
    pub log_scale: f64,
}

/// Evaluate the weighted objective and its gradient. Terms whose weight is
/// zero contribute their raw value to the breakdown but nothing to the
/// gradient.
pub fn objective(
    inputs: &ObjectiveInputs<'_>,
    heads: &ProjectionHeads,
    log_scale: f64,
    opts: &ObjectiveOptions,
) -> Result<(LossBreakdown, ObjectiveGrads)> {
    let w = &opts.weights;
    w.validate()?;
    let n = inputs.global_image.nrows();
    let mut grads = ObjectiveGrads {
        global_image: Array2::zeros(inputs.global_image.raw_dim()),
        global_text: Array2::zeros(inputs.global_text.raw_dim()),
        local_image: None,
        local_text: None,
        pooled_patches: None,
        pooled_tokens: None,
        heads: heads.zeros_like(),
        log_scale: 0.0,
    };

    let global = contrastive_with_grad(inputs.global_image, inputs.global_text, log_scale)?;
    if w.global > 0.0 {
        grads.global_image.scaled_add(w.global, &global.dv);
        grads.global_text.scaled_add(w.global, &global.dt);
        grads.log_scale += w.global * global.dlog_scale;
    }

    let (mut local_raw, mut tsl_raw) = (0.0, 0.0);
    if let Some(l) = &inputs.local {
        if l.primary.len() != n {
            return Err(Error::InvalidInput("one primary pair per record required".into()));
        }
        let mut d_li = Array2::zeros(l.image_cls.raw_dim());
        let mut d_lt = Array2::zeros(l.text_cls.raw_dim());

        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), l.primary);
        let local = contrastive_with_grad(&pick(l.image_cls), &pick(l.text_cls), log_scale)?;
        local_raw = local.loss;
        if w.local > 0.0 {
            for (row, &p) in l.primary.iter().enumerate() {
                d_li.row_mut(p).scaled_add(w.local, &local.dv.row(row));
                d_lt.row_mut(p).scaled_add(w.local, &local.dt.row(row));
            }
            grads.log_scale += w.local * local.dlog_scale;
        }

        let (p_hat, p_cache) = heads.vision.forward(l.pooled_patches);
        let (s_hat, s_cache) = heads.text.forward(l.pooled_tokens);
        let vis = similarity_mse(&p_hat, l.image_cls, l.weights, n, opts.reduction)?;
        let txt = similarity_mse(&s_hat, l.text_cls, l.weights, n, opts.reduction)?;
        tsl_raw = vis.loss + txt.loss;
        if w.tsl > 0.0 {
            let dp = heads
                .vision
                .backward(&p_cache, &(&vis.d_pred * w.tsl), &mut grads.heads.vision);
            let ds = heads
                .text
                .backward(&s_cache, &(&txt.d_pred * w.tsl), &mut grads.heads.text);
            grads.pooled_patches = Some(dp);
            grads.pooled_tokens = Some(ds);
            if !opts.stop_grad_targets {
                d_li.scaled_add(w.tsl, &vis.d_target);
                d_lt.scaled_add(w.tsl, &txt.d_target);
            }
        }
        grads.local_image = Some(d_li);
        grads.local_text = Some(d_lt);
    }

    let total = w.global * global.loss + w.local * local_raw + w.tsl * tsl_raw;
    let breakdown = LossBreakdown {
        global: global.loss,
        local: local_raw,
        tsl: tsl_raw,
        total,
        lambda_global: w.global,
        lambda_local: w.local,
        lambda_tsl: w.tsl,
    };
    Ok((breakdown, grads))
}
