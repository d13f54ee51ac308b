//! Mini-batch fine-tuning of the dual encoder on global and local pairs.
//!
//! Both branches run through the same encoder parameters in every step; the
//! local branch is skipped entirely when its two loss weights are zero, so
//! an ablated run is the same computation as one without those terms.

mod batch;
mod config;
mod gradcheck;
mod model;
mod optim;

pub use batch::{make_batch, prepare, Batch, PreparedPair, PreparedRecord};
pub use config::{TrainConfig, CONFIG_VERSION};
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport, TensorCheck};
pub use model::{Model, ModelConfig};
pub use optim::AdamW;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{objective, pool_mean, LocalInputs, LossBreakdown, ObjectiveInputs, ObjectiveOptions};
use crate::datagen::derive_seed;
use crate::encoders::checkpoint::{read_container, write_container, NamedArray};
use crate::encoders::params::Params;
use crate::encoders::Vocab;
use crate::flism::AlignedRecord;
use crate::{Error, Result};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Loss of one batch and, when requested, the gradient of the total with
/// respect to every model parameter.
pub fn batch_loss(
    model: &Model,
    batch: &Batch,
    opts: &ObjectiveOptions,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Model>)> {
    let enc = &model.encoder;
    let (b, d) = (batch.len(), enc.dim());
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }

    let mut gi = Array2::zeros((b, d));
    let mut gt = Array2::zeros((b, d));
    let mut img = Vec::with_capacity(b);
    let mut cap = Vec::with_capacity(b);
    for i in 0..b {
        let (o, c) = enc.vision.forward(&batch.images[i])?;
        gi.row_mut(i).assign(&o.cls);
        img.push((o.tokens, c));
        let (o, c) = enc.text.forward(&batch.captions[i])?;
        gt.row_mut(i).assign(&o.cls);
        cap.push((o.tokens, c));
    }

    let use_local = opts.weights.needs_local();
    let np = if use_local { batch.crops.len() } else { 0 };
    let mut li = Array2::zeros((np, d));
    let mut lt = Array2::zeros((np, d));
    let mut pp = Array2::zeros((np, d));
    let mut pt = Array2::zeros((np, d));
    let mut crop_caches = Vec::with_capacity(np);
    let mut sent_caches = Vec::with_capacity(np);
    for p in 0..np {
        let (o, c) = enc.vision.forward(&batch.crops[p])?;
        li.row_mut(p).assign(&o.cls);
        crop_caches.push(c);
        let (o, c) = enc.text.forward(&batch.sentences[p])?;
        lt.row_mut(p).assign(&o.cls);
        sent_caches.push(c);
        let owner = batch.owner[p];
        pp.row_mut(p).assign(&pool_mean(&img[owner].0, &batch.patch_sets[p])?);
        pt.row_mut(p).assign(&pool_mean(&cap[owner].0, &batch.token_sets[p])?);
    }

    let inputs = ObjectiveInputs {
        global_image: &gi,
        global_text: &gt,
        local: use_local.then_some(LocalInputs {
            image_cls: &li,
            text_cls: &lt,
            pooled_patches: &pp,
            pooled_tokens: &pt,
            weights: &batch.weights,
            primary: &batch.primary,
        }),
    };
    let (loss, g) = objective(&inputs, &model.heads, model.log_scale, opts)?;
    if !loss.is_finite() {
        log::error!(
            "non-finite loss: global={} local={} tsl={} log_scale={}",
            loss.global,
            loss.local,
            loss.tsl,
            model.log_scale
        );
        return Err(Error::NonFinite {
            global: loss.global,
            local: loss.local,
            tsl: loss.tsl,
        });
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grads = model.zeros_like();
    grads.heads = g.heads;
    grads.log_scale = g.log_scale;

    // scatter pooled-token gradients back onto the global token matrices
    let mut d_img: Vec<Array2<f64>> = img.iter().map(|(t, _)| Array2::zeros(t.raw_dim())).collect();
    let mut d_cap: Vec<Array2<f64>> = cap.iter().map(|(t, _)| Array2::zeros(t.raw_dim())).collect();
    if let Some(dp) = &g.pooled_patches {
        scatter_mean(dp, &batch.patch_sets, &batch.owner, &mut d_img);
    }
    if let Some(ds) = &g.pooled_tokens {
        scatter_mean(ds, &batch.token_sets, &batch.owner, &mut d_cap);
    }
    let ge = &mut grads.encoder;
    for i in 0..b {
        let dcls = g.global_image.row(i).to_owned();
        enc.vision.backward(&img[i].1, &dcls, Some(&d_img[i]), &mut ge.vision);
        let dcls = g.global_text.row(i).to_owned();
        enc.text.backward(&cap[i].1, &dcls, Some(&d_cap[i]), &mut ge.text);
    }
    if let (Some(dli), Some(dlt)) = (&g.local_image, &g.local_text) {
        for p in 0..np {
            enc.vision
                .backward(&crop_caches[p], &dli.row(p).to_owned(), None, &mut ge.vision);
            enc.text
                .backward(&sent_caches[p], &dlt.row(p).to_owned(), None, &mut ge.text);
        }
    }
    Ok((loss, Some(grads)))
}

fn scatter_mean(d_pooled: &Array2<f64>, sets: &[Vec<usize>], owner: &[usize], out: &mut [Array2<f64>]) {
    for (p, set) in sets.iter().enumerate() {
        let share: Array1<f64> = d_pooled.row(p).to_owned() / set.len() as f64;
        for &k in set {
            let mut row = out[owner[p]].row_mut(k);
            row += &share;
        }
    }
}

/// One optimizer update; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    batch: &Batch,
    opts: &ObjectiveOptions,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_loss(model, batch, opts, true)?;
    optimizer.update(model, &grads.expect("gradients requested"));
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub global: f64,
    pub local: f64,
    pub tsl: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<StepLog>,
}

impl TrainState {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let n = model.num_params();
        TrainState {
            optimizer: AdamW::new(config.learning_rate, config.weight_decay, n),
            model,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Model plus optimizer moments and history; the shuffle order is a
    /// function of `(seed, epoch)`, so nothing else is needed to resume.
    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        let mut meta = self.model.meta();
        meta["train"] = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "optimizer": self.optimizer.hyper(),
            "history": self.history,
            "config": config,
        });
        let mut arrays = self.model.to_arrays();
        arrays.push(NamedArray {
            name: "optimizer.m".into(),
            shape: vec![self.optimizer.m.len()],
            data: self.optimizer.m.clone(),
        });
        arrays.push(NamedArray {
            name: "optimizer.v".into(),
            shape: vec![self.optimizer.v.len()],
            data: self.optimizer.v.clone(),
        });
        write_container(path, meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = read_container(path)?;
        let model = Model::from_parts(&meta, &arrays)?;
        let bad = |d: &str| Error::malformed(format!("training state {}", path.display()), d);
        let train = meta.get("train").ok_or_else(|| bad("no training state"))?;
        let field = |k: &str| -> Result<serde_json::Value> { train.get(k).cloned().ok_or_else(|| bad(k)) };
        let epoch: usize = serde_json::from_value(field("epoch")?).map_err(|e| bad(&e.to_string()))?;
        let step: u64 = serde_json::from_value(field("step")?).map_err(|e| bad(&e.to_string()))?;
        let history: Vec<StepLog> = serde_json::from_value(field("history")?).map_err(|e| bad(&e.to_string()))?;
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .map(|a| a.data.clone())
                .ok_or_else(|| bad(name))
        };
        let optimizer = AdamW::from_hyper(&field("optimizer")?, find("optimizer.m")?, find("optimizer.v")?)
            .map_err(|e| bad(&e.to_string()))?;
        if optimizer.m.len() != model.num_params() {
            return Err(bad("optimizer state does not match the model"));
        }
        Ok(TrainState {
            model,
            optimizer,
            epoch,
            step,
            history,
        })
    }
}

/// Vocabulary over every caption of the training set.
pub fn build_vocab(records: &[AlignedRecord]) -> Vocab {
    Vocab::from_texts(records.iter().map(|a| a.record.caption.as_str()))
}

/// Fresh model seeded from the config.
pub fn init_model(vocab: Vocab, config: &TrainConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    Model::new(config.model.clone(), vocab, config.weights.temperature, &mut rng)
}

/// Record order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    order
}

/// Train from `state` until `config.epochs` epochs are complete.
///
/// With `out_dir`, the step log is kept in `loss_log.jsonl` and a resumable
/// checkpoint is written after each epoch under `checkpoints/`, keeping the
/// most recent `keep_checkpoints`.
pub fn fit(
    records: &[PreparedRecord],
    mut state: TrainState,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let opts = config.objective_options();
    let mut log_file = match out_dir {
        Some(dir) => {
            let ck = dir.join(CHECKPOINT_DIR);
            fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
            let path = dir.join(LOSS_LOG);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for h in &state.history {
                write_log_line(&mut f, h, &path)?;
            }
            Some((f, path))
        }
        None => None,
    };
    let steps_per_epoch = records.len().div_ceil(config.batch_size);
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let started = std::time::Instant::now();
        let order = epoch_order(records.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(records, chunk)?;
            let loss = train_step(&mut state.model, &mut state.optimizer, &batch, &opts)?;
            state.step += 1;
            let entry = StepLog {
                epoch,
                step: state.step,
                global: loss.global,
                local: loss.local,
                tsl: loss.tsl,
                total: loss.total,
                lr: state.optimizer.lr,
            };
            if let Some((f, path)) = &mut log_file {
                write_log_line(f, &entry, path)?;
            }
            state.history.push(entry);
        }
        state.epoch += 1;
        let recent = &state.history[state.history.len() - steps_per_epoch..];
        let mean = |f: fn(&StepLog) -> f64| recent.iter().map(f).sum::<f64>() / recent.len() as f64;
        log::info!(
            "epoch {}/{} total={:.4} global={:.4} local={:.4} tsl={:.4} ({:.1}s)",
            state.epoch,
            config.epochs,
            mean(|s| s.total),
            mean(|s| s.global),
            mean(|s| s.local),
            mean(|s| s.tsl),
            started.elapsed().as_secs_f64()
        );
        if let Some(dir) = out_dir {
            state.save(&checkpoint_path(dir, state.epoch), config)?;
            prune_checkpoints(dir, state.epoch, config.keep_checkpoints)?;
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        state.model.save(&path)?;
    }
    Ok(state)
}

fn write_log_line(f: &mut fs::File, entry: &StepLog, path: &Path) -> Result<()> {
    let line = serde_json::to_string(entry).map_err(|e| Error::malformed("loss log", e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:03}.ckpt"))
}

fn prune_checkpoints(out_dir: &Path, epoch: usize, keep: usize) -> Result<()> {
    if keep == 0 || epoch <= keep {
        return Ok(());
    }
    let stale = checkpoint_path(out_dir, epoch - keep);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
