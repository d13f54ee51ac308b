//! The trainable bundle: both encoders, the two projection heads, the shared
//! logit scale, and the vocabulary the text encoder was built for.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{ProjectionHeads, ProjectionKind};
use crate::datagen::Sentence;
use crate::encoders::checkpoint::{read_container, write_container, NamedArray};
use crate::encoders::params::{join, Params, Visitor, VisitorMut};
use crate::encoders::{tokenize, DualEncoder, EncoderOutput, TextConfig, Tokenization, VisionConfig, Vocab};
use crate::flism::{RegionCandidate, RegionSentenceEmbedder};
use crate::image_ops::{crop_resized, Image};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    /// `vocab_size` is replaced by the size of the vocabulary at build time.
    pub text: TextConfig,
    pub projection: ProjectionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            projection: ProjectionKind::Affine,
        }
    }
}

impl ModelConfig {
    /// Small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        ModelConfig {
            vision: VisionConfig {
                image_size: 16,
                patch_size: 4,
                depth: 1,
                dim: 8,
                heads: 2,
                mlp_ratio: 2,
            },
            text: TextConfig {
                vocab_size: 3,
                max_len: 96,
                depth: 1,
                dim: 8,
                heads: 2,
                mlp_ratio: 2,
                pe_base_len: 8,
                pe_keep: 4,
            },
            projection: ProjectionKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: DualEncoder,
    pub heads: ProjectionHeads,
    /// Logarithm of the inverse temperature, shared by both contrastive terms.
    pub log_scale: f64,
    pub vocab: Vocab,
    pub config: ModelConfig,
}

impl Model {
    pub fn new<R: Rng>(mut config: ModelConfig, vocab: Vocab, temperature: f64, rng: &mut R) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        config.text.vocab_size = vocab.len();
        let encoder = DualEncoder::new(config.vision.clone(), config.text.clone(), rng)?;
        let heads = ProjectionHeads::new(config.projection, encoder.dim(), rng);
        Ok(Model {
            encoder,
            heads,
            log_scale: (1.0 / temperature).ln(),
            vocab,
            config,
        })
    }

    pub fn image_size(&self) -> usize {
        self.config.vision.image_size
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokenization> {
        tokenize(text, &self.vocab, self.config.text.max_len)
    }

    pub fn encode_image(&self, image: &Image) -> Result<EncoderOutput> {
        self.encoder.vision.encode(image)
    }

    pub fn encode_text(&self, text: &str) -> Result<EncoderOutput> {
        self.encoder.text.encode(&self.tokenize(text)?)
    }

    /// Order-sensitive FNV-1a hash over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit("", &mut |_, s, _| {
            for v in s {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        });
        h
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        self.visit("", &mut |name, s, shape| {
            out.push(NamedArray {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: s.to_vec(),
            })
        });
        out
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.config,
            "vocab": self.vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, self.meta(), &self.to_arrays())
    }

    /// Rebuild from checkpoint metadata and arrays. Extra arrays (optimizer
    /// state) are ignored.
    pub fn from_parts(meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<Self> {
        let bad = |d: String| Error::malformed("checkpoint", d);
        let config: ModelConfig =
            serde_json::from_value(meta.get("model").cloned().ok_or_else(|| bad("no model config".into()))?)
                .map_err(|e| bad(e.to_string()))?;
        let vocab: Vocab = serde_json::from_value(meta.get("vocab").cloned().ok_or_else(|| bad("no vocab".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(config, vocab, 1.0, &mut rng)?;
        let by_name: std::collections::HashMap<&str, &NamedArray> =
            arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut missing = None;
        model.visit_mut("", &mut |name, s, shape| match by_name.get(name) {
            Some(a) if a.shape == shape && a.data.len() == s.len() => s.copy_from_slice(&a.data),
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(bad(format!("tensor {name} missing or misshapen")));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = read_container(path)?;
        Self::from_parts(&meta, &arrays)
    }
}

use rand::SeedableRng;

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.encoder.visit(prefix, f);
        self.heads.visit(&join(prefix, "heads"), f);
        f(&join(prefix, "log_scale"), std::slice::from_ref(&self.log_scale), &[]);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.encoder.visit_mut(prefix, f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
        f(&join(prefix, "log_scale"), std::slice::from_mut(&mut self.log_scale), &[]);
    }
}

/// Match with the model's own CLS embeddings: regions are cropped and
/// resampled to the encoder input size.
impl RegionSentenceEmbedder for Model {
    fn embed_sentences(&self, sentences: &[Sentence]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((sentences.len(), self.encoder.dim()));
        for (mut row, s) in out.rows_mut().into_iter().zip(sentences) {
            row.assign(&self.encode_text(&s.text)?.cls);
        }
        Ok(out)
    }

    fn embed_regions(&self, image: &Image, regions: &[RegionCandidate]) -> Result<Array2<f64>> {
        let n = self.image_size();
        let mut out = Array2::zeros((regions.len(), self.encoder.dim()));
        for (mut row, r) in out.rows_mut().into_iter().zip(regions) {
            row.assign(&self.encode_image(&crop_resized(image, &r.bbox, n, n)?)?.cls);
        }
        Ok(out)
    }
}
