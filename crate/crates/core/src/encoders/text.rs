use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::layers::{normal_matrix, Stack, StackCache};
use super::params::{visit2, visit2_mut, Params, Visitor, VisitorMut};
use super::positional::interpolate_positional;
use super::tokenizer::Tokenization;
use super::{EncoderOutput, TextConfig};
use crate::{Error, Result};

/// Causal text transformer. The sentence embedding is read at the final
/// (`<eos>`) position.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub token_embed: Array2<f64>,
    pub positions: Array2<f64>,
    pub stack: Stack,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    ids: Vec<u32>,
    stack: StackCache,
}

impl TextEncoder {
    /// The positional table is drawn at `pe_base_len` rows and stretched to
    /// `max_len` before training starts.
    pub fn new<R: Rng>(cfg: TextConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let token_embed = normal_matrix(rng, cfg.vocab_size, d, 0.02);
        let base = normal_matrix(rng, cfg.pe_base_len, d, 0.01);
        let positions = interpolate_positional(&base, cfg.max_len, cfg.pe_keep)?;
        Ok(TextEncoder {
            token_embed,
            positions,
            stack: Stack::new(rng, cfg.depth, d, cfg.heads, cfg.mlp_ratio),
            cfg,
        })
    }

    pub fn forward(&self, ids: &[u32]) -> Result<(EncoderOutput, TextCache)> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::Shape {
                expected: format!("1..={} tokens", self.cfg.max_len),
                actual: format!("{} tokens", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let t = ids.len();
        let mut x = self.positions.slice(s![..t, ..]).to_owned();
        for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
            row += &self.token_embed.row(id as usize);
        }
        let (y, stack) = self.stack.forward(x, true);
        let out = EncoderOutput {
            cls: y.row(t - 1).to_owned(),
            tokens: y,
            attn_last: stack.last_attention(),
        };
        Ok((
            out,
            TextCache {
                ids: ids.to_vec(),
                stack,
            },
        ))
    }

    pub fn encode(&self, tokens: &Tokenization) -> Result<EncoderOutput> {
        self.forward(&tokens.ids).map(|(o, _)| o)
    }

    /// `dtokens` covers every position, including the one `cls` is read
    /// from; the two contributions are summed.
    pub fn backward(
        &self,
        cache: &TextCache,
        dcls: &Array1<f64>,
        dtokens: Option<&Array2<f64>>,
        g: &mut TextEncoder,
    ) {
        let t = cache.ids.len();
        let mut dy = match dtokens {
            Some(dt) => dt.clone(),
            None => Array2::zeros((t, self.cfg.dim)),
        };
        {
            let mut last = dy.row_mut(t - 1);
            last += dcls;
        }
        let dx = self.stack.backward(&cache.stack, &dy, &mut g.stack);
        {
            let mut gp = g.positions.slice_mut(s![..t, ..]);
            gp += &dx;
        }
        for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
            let mut dst = g.token_embed.row_mut(id as usize);
            dst += &row;
        }
    }
}

impl Params for TextEncoder {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        visit2(prefix, "token_embed", &self.token_embed, f);
        visit2(prefix, "positions", &self.positions, f);
        self.stack.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        visit2_mut(prefix, "token_embed", &mut self.token_embed, f);
        visit2_mut(prefix, "positions", &mut self.positions, f);
        self.stack.visit_mut(prefix, f);
    }
}
