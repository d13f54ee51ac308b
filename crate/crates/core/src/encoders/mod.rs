//! Miniature dual encoder.
//!
//! Both towers are pre-norm transformers returning the final-layer token
//! matrix and a CLS embedding: the class token for images, the `<eos>`
//! position for text. Embeddings are left unnormalized here; cosine
//! similarity is taken where they are compared.

pub mod checkpoint;
pub mod layers;
pub mod params;
mod pca;
mod positional;
pub mod text;
pub mod tokenizer;
pub mod vision;

pub use pca::{attention_pca, TokenPca};
pub use positional::interpolate_positional;
pub use text::TextEncoder;
pub use tokenizer::{tokenize, Tokenization, Vocab};
pub use vision::VisionEncoder;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use params::{join, Params, Visitor, VisitorMut};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 64,
            patch_size: 8,
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        check_width(self.dim, self.heads, self.depth)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Length of the positional table before interpolation.
    pub pe_base_len: usize,
    /// Leading positions copied exactly by the interpolation.
    pub pe_keep: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 64,
            max_len: 128,
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            pe_base_len: 32,
            pe_keep: 20,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < self.pe_base_len {
            return Err(Error::Config(format!(
                "max_len {} shorter than pe_base_len {}",
                self.max_len, self.pe_base_len
            )));
        }
        if self.pe_keep >= self.pe_base_len {
            return Err(Error::Config(format!(
                "pe_keep {} must be below pe_base_len {}",
                self.pe_keep, self.pe_base_len
            )));
        }
        if self.vocab_size < 3 || self.max_len < 3 {
            return Err(Error::Config("vocab_size and max_len must be at least 3".into()));
        }
        check_width(self.dim, self.heads, self.depth)
    }
}

fn check_width(dim: usize, heads: usize, depth: usize) -> Result<()> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} not divisible by heads {heads}")));
    }
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    Ok(())
}

/// Final-layer products of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls: Array1<f64>,
    /// Patch tokens (`N × d`, class token excluded) or sequence tokens
    /// (`M × d`, every position).
    pub tokens: Array2<f64>,
    /// Last block's attention, `heads × tokens × tokens`.
    pub attn_last: Array3<f64>,
}

impl EncoderOutput {
    pub fn is_finite(&self) -> bool {
        self.cls.iter().chain(self.tokens.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

impl DualEncoder {
    pub fn new<R: Rng>(vision: VisionConfig, text: TextConfig, rng: &mut R) -> Result<Self> {
        if vision.dim != text.dim {
            return Err(Error::Config(format!(
                "vision dim {} differs from text dim {}",
                vision.dim, text.dim
            )));
        }
        Ok(DualEncoder {
            vision: VisionEncoder::new(vision, rng)?,
            text: TextEncoder::new(text, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.vision.cfg.dim
    }
}

impl Params for DualEncoder {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.vision.visit(&join(prefix, "vision"), f);
        self.text.visit(&join(prefix, "text"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.vision.visit_mut(&join(prefix, "vision"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::layers::tests::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (VisionConfig, TextConfig) {
        (
            VisionConfig {
                image_size: 8,
                patch_size: 4,
                depth: 1,
                dim: 4,
                heads: 2,
                mlp_ratio: 2,
            },
            TextConfig {
                vocab_size: 7,
                max_len: 8,
                depth: 1,
                dim: 4,
                heads: 2,
                mlp_ratio: 2,
                pe_base_len: 6,
                pe_keep: 3,
            },
        )
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> crate::image_ops::Image {
        Array3::from_shape_simple_fn((n, n, 3), || rng.gen::<f64>())
    }

    #[test]
    fn vision_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = VisionConfig {
            patch_size: 16,
            ..VisionConfig::default()
        };
        let enc = VisionEncoder::new(cfg, &mut rng).unwrap();
        let img = random_image(&mut rng, 64);
        let a = enc.encode(&img).unwrap();
        assert_eq!(a.tokens.dim(), (16, 64));
        assert_eq!(a.attn_last.dim(), (4, 17, 17));
        assert!(a.is_finite());
        assert_eq!(a, enc.encode(&img).unwrap());
        assert!(enc.encode(&random_image(&mut rng, 32)).is_err());
    }

    #[test]
    fn vision_cls_gradient_matches_differences() {
        let (vc, _) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisionEncoder::new(vc, &mut rng).unwrap();
        let img = random_image(&mut rng, 8);
        let (_, cache) = enc.forward(&img).unwrap();
        let mut g = enc.zeros_like();
        enc.backward(&cache, &Array1::ones(4), None, &mut g);
        let err = check_params(&enc, &g, |p| p.encode(&img).unwrap().cls.sum());
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn text_shapes_and_position_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TextEncoder::new(
            TextConfig {
                vocab_size: 10,
                ..TextConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let a = enc.forward(&[1, 5, 6, 2]).unwrap().0;
        assert_eq!(a.tokens.dim(), (4, 64));
        assert_eq!(a.cls, a.tokens.row(3));
        assert!(a.is_finite());
        let b = enc.forward(&[1, 6, 5, 2]).unwrap().0;
        assert_ne!(a.cls, b.cls);
        assert!(enc.forward(&[1, 10, 2]).is_err());
        assert!(enc.forward(&[]).is_err());
    }

    #[test]
    fn text_gradient_matches_differences() {
        let (_, tc) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = TextEncoder::new(tc, &mut rng).unwrap();
        let ids = [1u32, 4, 5, 4, 2];
        let w = layers::normal_matrix(&mut rng, 5, 4, 1.0);
        let (_, cache) = enc.forward(&ids).unwrap();
        let mut g = enc.zeros_like();
        enc.backward(&cache, &Array1::ones(4), Some(&w), &mut g);
        let err = check_params(&enc, &g, |p| {
            let o = p.forward(&ids).unwrap().0;
            o.cls.sum() + (&o.tokens * &w).sum()
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn config_invariants() {
        assert!(VisionConfig {
            patch_size: 12,
            ..VisionConfig::default()
        }
        .validate()
        .is_err());
        assert!(VisionConfig {
            heads: 5,
            ..VisionConfig::default()
        }
        .validate()
        .is_err());
        assert!(TextConfig {
            pe_keep: 32,
            ..TextConfig::default()
        }
        .validate()
        .is_err());
        assert!(TextConfig {
            max_len: 16,
            ..TextConfig::default()
        }
        .validate()
        .is_err());
    }
}
