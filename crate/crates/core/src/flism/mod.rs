//! Local image-region ↔ sentence matching.
//!
//! Region candidates are the detector boxes plus, optionally, the four
//! quadrants and a central box. Every candidate crop and every caption
//! sentence is embedded, each sentence is paired with its most similar
//! region, and the best of those pairs (or the best three) becomes the
//! record's local supervision.

mod embedder;
mod io;

pub use embedder::{AttributeEmbedder, RegionSentenceEmbedder};
pub use io::{
    read_detections, read_flism_manifest, run_flism, write_flism_manifest, AlignedRecord, FlismConfig,
    FLISM_VERSION,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::cosine_sim_matrix;
use crate::datagen::Sentence;
use crate::image_ops::{crop_resized, BBox, Image};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    Detected,
    Quadrant,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionCandidate {
    pub bbox: BBox,
    pub source: RegionSource,
}

/// The four quadrants (TL, TR, BL, BR) and the center box
/// `(W/4, H/4, 3W/4, 3H/4)`.
pub fn partition_boxes(width: usize, height: usize) -> [BBox; 5] {
    let (w, h) = (width as i64, height as i64);
    let (hw, hh) = (w / 2, h / 2);
    [
        BBox::new(0, 0, hw, hh),
        BBox::new(hw, 0, w, hh),
        BBox::new(0, hh, hw, h),
        BBox::new(hw, hh, w, h),
        BBox::new(w / 4, h / 4, 3 * w / 4, 3 * h / 4),
    ]
}

/// Clipped detections followed by the partition boxes, with exact
/// duplicates removed (the earlier candidate survives).
pub fn propose_regions(
    width: usize,
    height: usize,
    detections: &[BBox],
    use_partitions: bool,
) -> Vec<RegionCandidate> {
    let mut out: Vec<RegionCandidate> = Vec::new();
    let mut push = |bbox: BBox, source| {
        if bbox.is_degenerate() || out.iter().any(|c| c.bbox == bbox) {
            return;
        }
        out.push(RegionCandidate { bbox, source });
    };
    for d in detections {
        push(d.clip(width, height), RegionSource::Detected);
    }
    if use_partitions {
        let parts = partition_boxes(width, height);
        for q in &parts[..4] {
            push(*q, RegionSource::Quadrant);
        }
        push(parts[4], RegionSource::Center);
    }
    out
}

/// Crop a candidate and resample it to the encoder input size.
pub fn crop(image: &Image, bbox: &BBox, out_size: usize) -> Result<Image> {
    crop_resized(image, bbox, out_size, out_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `M × N`, sentence by region.
    pub sim_matrix: Array2<f64>,
    /// Per sentence, the best region and its score.
    pub per_text_best: Vec<(usize, f64)>,
}

/// Cosine similarity of every sentence to every region; each sentence keeps
/// its highest-scoring region, ties going to the lower region index.
pub fn match_local_pairs(text_cls: &Array2<f64>, region_cls: &Array2<f64>) -> Result<MatchResult> {
    if text_cls.nrows() == 0 || region_cls.nrows() == 0 {
        return Err(crate::Error::InvalidInput("need at least one sentence and one region".into()));
    }
    let sim_matrix = cosine_sim_matrix(text_cls, region_cls)?;
    let per_text_best = sim_matrix
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (0, row[0]);
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .collect();
    Ok(MatchResult {
        sim_matrix,
        per_text_best,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// The single highest-scoring sentence/region pair.
    #[default]
    #[serde(rename = "top1")]
    Top1,
    /// The three best pairs, equally weighted.
    #[serde(rename = "top3u")]
    Top3Uniform,
    /// The three best pairs, weighted by score shifted into `[0, 2]`.
    #[serde(rename = "top3w")]
    Top3Weighted,
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Strategy::Top1),
            "top3u" => Ok(Strategy::Top3Uniform),
            "top3w" => Ok(Strategy::Top3Weighted),
            other => Err(crate::Error::Config(format!(
                "unknown strategy {other:?} (expected top1, top3u or top3w)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Top1 => "top1",
            Strategy::Top3Uniform => "top3u",
            Strategy::Top3Weighted => "top3w",
        })
    }
}

/// Chosen `(sentence, region)` cell with its training weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub sentence: usize,
    pub region: usize,
    pub score: f64,
    pub weight: f64,
}

/// Rank sentences by their best score (ties to the lower sentence index)
/// and keep one or three of them.
pub fn select_pairs(m: &MatchResult, strategy: Strategy) -> Vec<Selection> {
    let mut order: Vec<usize> = (0..m.per_text_best.len()).collect();
    order.sort_by(|&a, &b| {
        m.per_text_best[b]
            .1
            .total_cmp(&m.per_text_best[a].1)
            .then(a.cmp(&b))
    });
    let keep = match strategy {
        Strategy::Top1 => 1,
        Strategy::Top3Uniform | Strategy::Top3Weighted => 3,
    }
    .min(order.len());
    let chosen = &order[..keep];
    let shifted: Vec<f64> = chosen.iter().map(|&i| m.per_text_best[i].1 + 1.0).collect();
    let total: f64 = shifted.iter().sum();
    chosen
        .iter()
        .zip(&shifted)
        .map(|(&i, &sh)| {
            let (region, score) = m.per_text_best[i];
            let weight = match strategy {
                Strategy::Top3Weighted if total > 0.0 => sh / total,
                _ => 1.0 / keep as f64,
            };
            Selection {
                sentence: i,
                region,
                score,
                weight,
            }
        })
        .collect()
}

/// A matched region/sentence pair of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPair {
    pub bbox: BBox,
    pub sentence_index: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub weight: f64,
}

pub fn to_local_pairs(
    selections: &[Selection],
    regions: &[RegionCandidate],
    sentences: &[Sentence],
) -> Vec<LocalPair> {
    selections
        .iter()
        .map(|s| LocalPair {
            bbox: regions[s.region].bbox,
            sentence_index: s.sentence,
            start: sentences[s.sentence].start,
            end: sentences[s.sentence].end,
            score: s.score,
            weight: s.weight,
        })
        .collect()
}
