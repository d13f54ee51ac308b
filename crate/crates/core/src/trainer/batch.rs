//! Turning aligned records into encoder-ready tensors.

use crate::alignment::{select_patch_indices, select_token_indices};
use crate::encoders::Tokenization;
use crate::flism::AlignedRecord;
use crate::image_ops::{crop_resized, resize_bilinear, Image};
use crate::{Error, Result};

use super::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    /// Region crop at encoder resolution.
    pub crop: Image,
    /// The matched sentence tokenized on its own.
    pub sentence: Tokenization,
    /// Patches of the global image covered by the region.
    pub patches: Vec<usize>,
    /// Caption tokens covering the sentence.
    pub tokens: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub id: String,
    pub image: Image,
    pub caption: Tokenization,
    /// Highest-scoring pair first.
    pub pairs: Vec<PreparedPair>,
}

/// Tokenize, crop and index every record for `model`.
///
/// Pairs whose sentence falls past the caption truncation point are
/// dropped with a warning and the remaining weights renormalized; a record
/// left with no pairs is dropped entirely.
pub fn prepare(aligned: &[AlignedRecord], model: &Model) -> Result<Vec<PreparedRecord>> {
    let n = model.image_size();
    let patch = model.config.vision.patch_size;
    let mut out = Vec::with_capacity(aligned.len());
    for a in aligned {
        let rec = &a.record;
        if a.local_pairs.is_empty() {
            return Err(Error::MissingLocalPairs(rec.id.clone()));
        }
        let caption = model.tokenize(&rec.caption)?;
        let src = rec.image_size();
        let image = if src == n { rec.image.clone() } else { resize_bilinear(&rec.image, n, n) };
        let mut pairs = Vec::new();
        for lp in &a.local_pairs {
            let tokens = match select_token_indices(lp.start, lp.end, &caption) {
                Ok(t) => t.indices,
                Err(Error::Truncated { .. }) => {
                    log::warn!("{}: sentence {} truncated away, pair dropped", rec.id, lp.sentence_index);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let bbox = scale_box(&lp.bbox, src, n);
            pairs.push(PreparedPair {
                crop: crop_resized(&rec.image, &lp.bbox, n, n)?,
                sentence: model.tokenize(&rec.caption[lp.start..lp.end])?,
                patches: select_patch_indices(&bbox, n, patch).indices,
                tokens,
                weight: lp.weight,
            });
        }
        if pairs.is_empty() {
            log::warn!("{}: no usable local pair, record excluded", rec.id);
            continue;
        }
        let total: f64 = pairs.iter().map(|p| p.weight).sum();
        if total > 0.0 {
            for p in &mut pairs {
                p.weight /= total;
            }
        }
        out.push(PreparedRecord {
            id: rec.id.clone(),
            image,
            caption,
            pairs,
        });
    }
    Ok(out)
}

fn scale_box(b: &crate::image_ops::BBox, from: usize, to: usize) -> crate::image_ops::BBox {
    if from == to {
        return *b;
    }
    let s = |v: i64| (v as f64 * to as f64 / from as f64).round() as i64;
    crate::image_ops::BBox::new(s(b.x1), s(b.y1), s(b.x2), s(b.y2))
}

/// Everything one step consumes, aligned by batch position. Pair-level
/// fields have one entry per pair; `owner` maps a pair to its record.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Image>,
    pub captions: Vec<Vec<u32>>,
    pub crops: Vec<Image>,
    pub sentences: Vec<Vec<u32>>,
    pub patch_sets: Vec<Vec<usize>>,
    pub token_sets: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    pub owner: Vec<usize>,
    /// Index of each record's first pair.
    pub primary: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn make_batch(records: &[PreparedRecord], indices: &[usize]) -> Result<Batch> {
    let mut b = Batch {
        images: Vec::with_capacity(indices.len()),
        captions: Vec::with_capacity(indices.len()),
        crops: Vec::new(),
        sentences: Vec::new(),
        patch_sets: Vec::new(),
        token_sets: Vec::new(),
        weights: Vec::new(),
        owner: Vec::new(),
        primary: Vec::with_capacity(indices.len()),
    };
    for (pos, &i) in indices.iter().enumerate() {
        let r = records
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("record index {i} out of range")))?;
        if r.pairs.is_empty() {
            return Err(Error::MissingLocalPairs(r.id.clone()));
        }
        b.images.push(r.image.clone());
        b.captions.push(r.caption.ids.clone());
        b.primary.push(b.crops.len());
        for p in &r.pairs {
            b.crops.push(p.crop.clone());
            b.sentences.push(p.sentence.ids.clone());
            b.patch_sets.push(p.patches.clone());
            b.token_sets.push(p.tokens.clone());
            b.weights.push(p.weight);
            b.owner.push(pos);
        }
    }
    Ok(b)
}
