//! Embedders that turn sentences and region crops into comparable vectors.

use ndarray::Array2;

use super::RegionCandidate;
use crate::datagen::{Sentence, OBJECT_COLORS};
use crate::encoders::tokenizer::words;
use crate::image_ops::{crop_exact, Image};
use crate::Result;

/// Anything that can place sentences and image regions in one space.
pub trait RegionSentenceEmbedder {
    fn embed_sentences(&self, sentences: &[Sentence]) -> Result<Array2<f64>>;
    fn embed_regions(&self, image: &Image, regions: &[RegionCandidate]) -> Result<Array2<f64>>;
}

/// Hand-built embedding keyed on object colors.
///
/// A sentence maps to the indicator of the object colors it names, a region
/// to the fraction of its pixels painted in each object color. One extra
/// dimension per modality keeps every row nonzero; the two are orthogonal,
/// so they never contribute to a cross-modal cosine.
#[derive(Debug, Clone)]
pub struct AttributeEmbedder {
    /// Per-channel tolerance when matching a pixel against a palette color.
    pub tolerance: f64,
    pub bias: f64,
}

impl Default for AttributeEmbedder {
    fn default() -> Self {
        AttributeEmbedder {
            tolerance: 0.02,
            bias: 1e-3,
        }
    }
}

impl AttributeEmbedder {
    pub fn dim(&self) -> usize {
        OBJECT_COLORS.len() + 2
    }

    fn palette_index(&self, px: [f64; 3]) -> Option<usize> {
        OBJECT_COLORS.iter().position(|(_, rgb)| {
            rgb.iter()
                .zip(px)
                .all(|(&c, p)| (c as f64 / 255.0 - p).abs() <= self.tolerance)
        })
    }
}

impl RegionSentenceEmbedder for AttributeEmbedder {
    fn embed_sentences(&self, sentences: &[Sentence]) -> Result<Array2<f64>> {
        let n = OBJECT_COLORS.len();
        let mut out = Array2::zeros((sentences.len(), self.dim()));
        for (i, s) in sentences.iter().enumerate() {
            for (_, _, w) in words(&s.text) {
                if let Some(c) = OBJECT_COLORS.iter().position(|(name, _)| *name == w) {
                    out[[i, c]] = 1.0;
                }
            }
            out[[i, n]] = self.bias;
        }
        Ok(out)
    }

    fn embed_regions(&self, image: &Image, regions: &[RegionCandidate]) -> Result<Array2<f64>> {
        let n = OBJECT_COLORS.len();
        let mut out = Array2::zeros((regions.len(), self.dim()));
        for (i, r) in regions.iter().enumerate() {
            let crop = crop_exact(image, &r.bbox)?;
            let (h, w, _) = crop.dim();
            let total = (h * w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let px = [crop[[y, x, 0]], crop[[y, x, 1]], crop[[y, x, 2]]];
                    if let Some(c) = self.palette_index(px) {
                        out[[i, c]] += 1.0 / total;
                    }
                }
            }
            out[[i, n + 1]] = self.bias;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, SceneSpec};
    use crate::flism::{propose_regions, RegionSource};

    #[test]
    fn object_sentence_matches_its_own_box() {
        let rec = generate_scene(&SceneSpec {
            n_objects: 3,
            seed: 4,
            ..SceneSpec::default()
        })
        .unwrap();
        let e = AttributeEmbedder::default();
        let t = e.embed_sentences(&rec.sentences).unwrap();
        let regions: Vec<RegionCandidate> = rec
            .objects
            .iter()
            .map(|o| RegionCandidate {
                bbox: o.bbox,
                source: RegionSource::Detected,
            })
            .collect();
        let r = e.embed_regions(&rec.image, &regions).unwrap();
        let m = crate::flism::match_local_pairs(&t, &r).unwrap();
        for (k, o) in rec.objects.iter().enumerate() {
            assert_eq!(m.per_text_best[o.sentence_index].0, k);
            assert!(m.per_text_best[o.sentence_index].1 > 0.99);
        }
        // the summary names no object color
        assert!(m.per_text_best[0].1.abs() < 1e-12);
    }

    #[test]
    fn modal_color_of_object_crop() {
        let rec = generate_scene(&SceneSpec {
            n_objects: 4,
            seed: 11,
            ..SceneSpec::default()
        })
        .unwrap();
        let e = AttributeEmbedder::default();
        let regions = propose_regions(64, 64, &rec.objects.iter().map(|o| o.bbox).collect::<Vec<_>>(), false);
        let r = e.embed_regions(&rec.image, &regions).unwrap();
        for (o, row) in rec.objects.iter().zip(r.rows()) {
            let best = (0..OBJECT_COLORS.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(OBJECT_COLORS[best].0, o.color);
        }
    }
}
