//! Detections input, the aligned-record manifest, and the batch driver.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    match_local_pairs, propose_regions, select_pairs, to_local_pairs, LocalPair, RegionSentenceEmbedder,
    Strategy,
};
use crate::datagen::{base_dir, load_record, read_lines, row_for, write_lines, RecordRow, SceneObject, SceneRecord, Sentence};
use crate::image_ops::BBox;
use crate::{Error, Result};

pub const FLISM_VERSION: &str = "flism/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRow {
    record_id: String,
    boxes: Vec<BBox>,
}

/// Read an external detections file: one `{record_id, boxes}` object per line.
pub fn read_detections(path: &Path) -> Result<HashMap<String, Vec<BBox>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DetectionRow = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(format!("{}:{}", path.display(), lineno + 1), e))?;
        out.entry(row.record_id).or_insert_with(Vec::new).extend(row.boxes);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlismConfig {
    pub strategy: Strategy,
    pub use_partitions: bool,
}

impl Default for FlismConfig {
    fn default() -> Self {
        FlismConfig {
            strategy: Strategy::Top1,
            use_partitions: true,
        }
    }
}

/// A record together with its selected local pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedRecord {
    pub record: SceneRecord,
    pub local_pairs: Vec<LocalPair>,
}

/// Match every record. Records absent from `detections` fall back to their
/// ground-truth object boxes, standing in for an oracle detector; pass an
/// empty map entry to run on partitions alone.
pub fn run_flism(
    records: &[SceneRecord],
    detections: Option<&HashMap<String, Vec<BBox>>>,
    cfg: &FlismConfig,
    embedder: &dyn RegionSentenceEmbedder,
) -> Result<Vec<AlignedRecord>> {
    records
        .iter()
        .map(|rec| {
            let size = rec.image_size();
            let oracle: Vec<BBox>;
            let boxes = match detections.and_then(|d| d.get(&rec.id)) {
                Some(b) => b.as_slice(),
                None => {
                    oracle = rec.objects.iter().map(|o| o.bbox).collect();
                    oracle.as_slice()
                }
            };
            let regions = propose_regions(size, size, boxes, cfg.use_partitions);
            if regions.is_empty() {
                return Err(Error::MissingLocalPairs(rec.id.clone()));
            }
            let t = embedder.embed_sentences(&rec.sentences)?;
            let r = embedder.embed_regions(&rec.image, &regions)?;
            let m = match_local_pairs(&t, &r)?;
            let selected = select_pairs(&m, cfg.strategy);
            log::debug!("{}: {} regions, best score {:.4}", rec.id, regions.len(), selected[0].score);
            Ok(AlignedRecord {
                record: rec.clone(),
                local_pairs: to_local_pairs(&selected, &regions, &rec.sentences),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlismRow {
    version: String,
    id: String,
    image_path: String,
    caption: String,
    sentences: Vec<Sentence>,
    objects: Vec<SceneObject>,
    local_pairs: Vec<LocalPair>,
}

/// Write the aligned manifest. Image paths are reused, so `path` must sit in
/// the same directory as the dataset manifest the records came from.
pub fn write_flism_manifest(aligned: &[AlignedRecord], path: &Path) -> Result<()> {
    let rows: Vec<FlismRow> = aligned
        .iter()
        .map(|a| {
            let r = row_for(&a.record, FLISM_VERSION);
            FlismRow {
                version: r.version,
                id: r.id,
                image_path: r.image_path,
                caption: r.caption,
                sentences: r.sentences,
                objects: r.objects,
                local_pairs: a.local_pairs.clone(),
            }
        })
        .collect();
    write_lines(&rows, path)
}

pub fn read_flism_manifest(path: &Path) -> Result<Vec<AlignedRecord>> {
    let base = base_dir(path);
    read_lines::<FlismRow>(path, FLISM_VERSION)?
        .into_iter()
        .map(|row| {
            let record = load_record(
                RecordRow {
                    version: row.version,
                    id: row.id,
                    image_path: row.image_path,
                    caption: row.caption,
                    sentences: row.sentences,
                    objects: row.objects,
                },
                &base,
            )?;
            Ok(AlignedRecord {
                record,
                local_pairs: row.local_pairs,
            })
        })
        .collect()
}
