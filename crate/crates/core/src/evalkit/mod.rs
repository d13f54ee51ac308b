//! Recall@K retrieval in both directions, report files, and attention heat
//! maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::alignment::cosine_sim_matrix;
use crate::datagen::SceneRecord;
use crate::encoders::attention_pca;
use crate::image_ops::{resize_bilinear, resize_nearest, save_png, Image};
use crate::trainer::Model;
use crate::{Error, Result};

pub const REPORT_VERSION: &str = "goalign-report/1";
pub const DEFAULT_KS: [usize; 6] = [1, 5, 10, 15, 25, 50];

/// Zero-based rank of the true item: every gallery item scoring higher,
/// plus equal-scoring items at a lower index.
pub fn rank_of(row: ndarray::ArrayView1<'_, f64>, truth: usize) -> usize {
    let s = row[truth];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

/// Fraction of queries (rows of `sim`) whose true gallery item ranks
/// within the top `k`. `k` above the gallery size is clamped.
pub fn recall_at_k(sim: &Array2<f64>, ground_truth: &[usize], k: usize) -> Result<f64> {
    let (q, g) = sim.dim();
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if ground_truth.len() != q || q == 0 {
        return Err(Error::InvalidInput(format!(
            "{} ground-truth entries for {q} queries",
            ground_truth.len()
        )));
    }
    if let Some(&bad) = ground_truth.iter().find(|&&t| t >= g) {
        return Err(Error::InvalidInput(format!("gallery index {bad} out of {g}")));
    }
    let k = k.min(g);
    let hits = sim
        .rows()
        .into_iter()
        .zip(ground_truth)
        .filter(|(row, &t)| rank_of(*row, t) < k)
        .count();
    Ok(hits as f64 / q as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalReport {
    pub version: String,
    pub ks: Vec<usize>,
    pub t2i: BTreeMap<usize, f64>,
    pub i2t: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub model_id: String,
    pub dataset_id: String,
}

impl RetrievalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::malformed("report", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e))?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("");
        if found != REPORT_VERSION {
            return Err(Error::Version {
                expected: REPORT_VERSION.into(),
                found: found.into(),
            });
        }
        serde_json::from_value(v).map_err(|e| Error::malformed(path.display().to_string(), e))
    }
}

fn fnv(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of record ids and captions.
pub fn dataset_id(records: &[SceneRecord]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325;
    for r in records {
        h = fnv(r.id.bytes().chain([0]).chain(r.caption.bytes()).chain([0]), h);
    }
    format!("{h:016x}")
}

fn at_model_size(image: &Image, n: usize) -> Image {
    if image.dim().0 == n && image.dim().1 == n {
        image.clone()
    } else {
        resize_bilinear(image, n, n)
    }
}

/// CLS embeddings of every image and caption, `(images, captions)`.
pub fn embed_records(model: &Model, records: &[SceneRecord]) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = model.encoder.dim();
    let n = model.image_size();
    let mut img = Array2::zeros((records.len(), d));
    let mut txt = Array2::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        img.row_mut(i).assign(&model.encode_image(&at_model_size(&r.image, n))?.cls);
        txt.row_mut(i).assign(&model.encode_text(&r.caption)?.cls);
    }
    Ok((img, txt))
}

/// Text-to-image and image-to-text Recall@K with record `i`'s caption
/// matching record `i`'s image.
pub fn evaluate(model: &Model, records: &[SceneRecord], ks: &[usize]) -> Result<RetrievalReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let (img, txt) = embed_records(model, records)?;
    let t2i_sim = cosine_sim_matrix(&txt, &img)?;
    let i2t_sim = t2i_sim.t().to_owned();
    let truth: Vec<usize> = (0..records.len()).collect();
    let mut t2i = BTreeMap::new();
    let mut i2t = BTreeMap::new();
    for &k in ks {
        t2i.insert(k, recall_at_k(&t2i_sim, &truth, k)?);
        i2t.insert(k, recall_at_k(&i2t_sim, &truth, k)?);
    }
    Ok(RetrievalReport {
        version: REPORT_VERSION.into(),
        ks: ks.to_vec(),
        t2i,
        i2t,
        n_queries: records.len(),
        model_id: format!("{:016x}", model.checksum()),
        dataset_id: dataset_id(records),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapArtifact {
    /// `grid × grid × 3`, the top three components as color channels.
    pub grid: Array3<f64>,
    /// Input image blended half and half with the upsampled grid.
    pub overlay: Image,
    pub energies: Vec<f64>,
    /// Constant input or too few varying components; the map is zero.
    pub degenerate: bool,
}

/// Path of the overlay written next to `out_path`.
pub fn overlay_path(out_path: &Path) -> PathBuf {
    let stem = out_path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    out_path.with_file_name(format!("{stem}_overlay.png"))
}

/// Project the final-layer patch tokens onto their top three principal
/// components, write the grid (upsampled to the image size) to `out_path`
/// and the overlay beside it.
pub fn export_attention(image: &Image, model: &Model, out_path: &Path) -> Result<HeatmapArtifact> {
    let n = model.image_size();
    let g = model.config.vision.grid();
    let input = at_model_size(image, n);
    let out = model.encode_image(&input)?;
    let first = [input[[0, 0, 0]], input[[0, 0, 1]], input[[0, 0, 2]]];
    let constant = input
        .indexed_iter()
        .all(|((_, _, c), &v)| v == first[c]);
    let k = 3.min(out.tokens.nrows().saturating_sub(1)).max(1);
    let pca = attention_pca(&out.tokens, k)?;
    let degenerate = constant || pca.degenerate;
    let mut grid = Array3::zeros((g, g, 3));
    if !degenerate {
        for i in 0..g * g {
            for c in 0..k {
                grid[[i / g, i % g, c]] = pca.map[[i, c]];
            }
        }
    }
    let up = resize_nearest(&grid, n, n);
    let overlay = (&input + &up) * 0.5;
    save_png(&up, out_path)?;
    save_png(&overlay, &overlay_path(out_path))?;
    Ok(HeatmapArtifact {
        grid,
        overlay,
        energies: if degenerate { vec![0.0; k] } else { pca.energies },
        degenerate,
    })
}
