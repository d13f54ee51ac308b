use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::layers::{normal_matrix, normal_vector, Linear, Stack, StackCache};
use super::params::{join, visit1, visit1_mut, visit2, visit2_mut, Params, Visitor, VisitorMut};
use super::{EncoderOutput, VisionConfig};
use crate::image_ops::Image;
use crate::{Error, Result};

/// Vision transformer: linear patch embedding, a learned class token and
/// learned positions, pre-norm blocks and a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    pub patch_embed: Linear,
    pub class_token: Array1<f64>,
    pub positions: Array2<f64>,
    pub stack: Stack,
}

#[derive(Debug, Clone)]
pub struct VisionCache {
    patches: Array2<f64>,
    stack: StackCache,
}

/// Row-major grid of flattened `patch × patch × 3` pixel blocks.
pub fn patchify(image: &Image, patch: usize) -> Array2<f64> {
    let (h, w, c) = image.dim();
    let (gr, gc) = (h / patch, w / patch);
    let mut out = Array2::zeros((gr * gc, patch * patch * c));
    for r in 0..gr {
        for q in 0..gc {
            let block = image.slice(s![r * patch..(r + 1) * patch, q * patch..(q + 1) * patch, ..]);
            let mut row = out.row_mut(r * gc + q);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    out
}

impl VisionEncoder {
    pub fn new<R: Rng>(cfg: VisionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        Ok(VisionEncoder {
            patch_embed: Linear::new(rng, patch_dim, d),
            class_token: normal_vector(rng, d, 0.02),
            positions: normal_matrix(rng, cfg.num_patches() + 1, d, 0.02),
            stack: Stack::new(rng, cfg.depth, d, cfg.heads, cfg.mlp_ratio),
            cfg,
        })
    }

    pub fn forward(&self, image: &Image) -> Result<(EncoderOutput, VisionCache)> {
        let (h, w, c) = image.dim();
        let n = self.cfg.image_size;
        if (h, w, c) != (n, n, 3) {
            return Err(Error::Shape {
                expected: format!("{n}x{n}x3"),
                actual: format!("{h}x{w}x{c}"),
            });
        }
        // pixels enter centered on zero, in [-1, 1]
        let patches = patchify(image, self.cfg.patch_size).mapv(|v| 2.0 * v - 1.0);
        let np = patches.nrows();
        let mut x = Array2::zeros((np + 1, self.cfg.dim));
        x.row_mut(0).assign(&self.class_token);
        x.slice_mut(s![1.., ..]).assign(&self.patch_embed.forward(&patches));
        x += &self.positions;
        let (y, stack) = self.stack.forward(x, false);
        let out = EncoderOutput {
            cls: y.row(0).to_owned(),
            tokens: y.slice(s![1.., ..]).to_owned(),
            attn_last: stack.last_attention(),
        };
        Ok((out, VisionCache { patches, stack }))
    }

    pub fn encode(&self, image: &Image) -> Result<EncoderOutput> {
        self.forward(image).map(|(o, _)| o)
    }

    /// Accumulate parameter gradients given `∂L/∂cls` and optionally
    /// `∂L/∂tokens`.
    pub fn backward(
        &self,
        cache: &VisionCache,
        dcls: &Array1<f64>,
        dtokens: Option<&Array2<f64>>,
        g: &mut VisionEncoder,
    ) {
        let np = cache.patches.nrows();
        let mut dy = Array2::zeros((np + 1, self.cfg.dim));
        dy.row_mut(0).assign(dcls);
        if let Some(dt) = dtokens {
            dy.slice_mut(s![1.., ..]).assign(dt);
        }
        let dx = self.stack.backward(&cache.stack, &dy, &mut g.stack);
        g.positions += &dx;
        g.class_token += &dx.row(0);
        let dpatch = dx.slice(s![1.., ..]).to_owned();
        self.patch_embed
            .backward(&cache.patches, &dpatch, &mut g.patch_embed);
    }
}

impl Params for VisionEncoder {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        visit1(prefix, "class_token", &self.class_token, f);
        visit2(prefix, "positions", &self.positions, f);
        self.stack.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        visit1_mut(prefix, "class_token", &mut self.class_token, f);
        visit2_mut(prefix, "positions", &mut self.positions, f);
        self.stack.visit_mut(prefix, f);
    }
}
