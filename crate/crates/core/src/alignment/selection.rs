//! Which patch tokens fall inside a box, which sequence tokens belong to a
//! sentence, and mean pooling over either set.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoders::Tokenization;
use crate::image_ops::BBox;
use crate::{Error, Result};

/// Membership rule for patch cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchRule {
    /// The cell center lies inside the half-open box.
    #[default]
    CellCenter,
    /// The cell and the box share positive area.
    AnyOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchIndexSet {
    /// Row-major patch positions, sorted.
    pub indices: Vec<usize>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIndexSet {
    pub indices: Vec<usize>,
}

pub fn select_patch_indices(bbox: &BBox, image_size: usize, patch_size: usize) -> PatchIndexSet {
    select_patch_indices_with(bbox, image_size, patch_size, PatchRule::CellCenter)
}

/// Patch cells covered by `bbox`. Falls back to the single cell holding the
/// box center when no cell qualifies.
pub fn select_patch_indices_with(
    bbox: &BBox,
    image_size: usize,
    patch_size: usize,
    rule: PatchRule,
) -> PatchIndexSet {
    let g = image_size / patch_size;
    let p = patch_size as f64;
    let mut indices = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let inside = match rule {
                PatchRule::CellCenter => {
                    let cx = c as f64 * p + p / 2.0;
                    let cy = r as f64 * p + p / 2.0;
                    cx >= bbox.x1 as f64 && cx < bbox.x2 as f64 && cy >= bbox.y1 as f64 && cy < bbox.y2 as f64
                }
                PatchRule::AnyOverlap => {
                    let ps = patch_size as i64;
                    let cell = BBox::new(c as i64 * ps, r as i64 * ps, (c as i64 + 1) * ps, (r as i64 + 1) * ps);
                    cell.intersection(bbox) > 0
                }
            };
            if inside {
                indices.push(r * g + c);
            }
        }
    }
    if indices.is_empty() {
        let (cx, cy) = bbox.center();
        let col = ((cx / p).floor().max(0.0) as usize).min(g - 1);
        let row = ((cy / p).floor().max(0.0) as usize).min(g - 1);
        indices.push(row * g + col);
    }
    PatchIndexSet { indices, grid: (g, g) }
}

/// Token positions whose characters intersect `[start, end)` of the text
/// that produced `tokens`. Special tokens never qualify.
pub fn select_token_indices(start: usize, end: usize, tokens: &Tokenization) -> Result<TokenIndexSet> {
    let hi = end.min(tokens.char_to_token.len());
    let mut indices: Vec<usize> = tokens.char_to_token[start.min(hi)..hi]
        .iter()
        .flatten()
        .copied()
        .collect();
    indices.dedup();
    if indices.is_empty() {
        if tokens.truncated {
            return Err(Error::Truncated { start, end });
        }
        return Err(Error::InvalidInput(format!("span {start}..{end} covers no words")));
    }
    Ok(TokenIndexSet { indices })
}

/// Mean of the selected rows.
pub fn pool_mean(tokens: &Array2<f64>, indices: &[usize]) -> Result<Array1<f64>> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty index set".into()));
    }
    let mut acc = Array1::zeros(tokens.ncols());
    for &i in indices {
        if i >= tokens.nrows() {
            return Err(Error::InvalidInput(format!(
                "index {i} outside {} tokens",
                tokens.nrows()
            )));
        }
        acc += &tokens.row(i);
    }
    Ok(acc / indices.len() as f64)
}
