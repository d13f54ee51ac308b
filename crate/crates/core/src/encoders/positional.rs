use ndarray::Array2;

use crate::{Error, Result};

/// Stretch a learned positional table to `new_len` rows. The first `keep`
/// rows are copied verbatim; the remaining rows linearly interpolate rows
/// `[keep, old_len)` so that output row `keep` maps to input row `keep` and
/// the last output row maps to the last input row.
pub fn interpolate_positional(pe: &Array2<f64>, new_len: usize, keep: usize) -> Result<Array2<f64>> {
    let old_len = pe.nrows();
    if keep >= old_len {
        return Err(Error::Config(format!(
            "keep ({keep}) must be smaller than the table length ({old_len})"
        )));
    }
    if new_len < old_len {
        return Err(Error::Config(format!(
            "cannot shrink positional table from {old_len} to {new_len}"
        )));
    }
    let mut out = Array2::zeros((new_len, pe.ncols()));
    for i in 0..keep {
        out.row_mut(i).assign(&pe.row(i));
    }
    let src_span = (old_len - 1 - keep) as f64;
    let dst_span = (new_len - 1 - keep) as f64;
    for i in keep..new_len {
        let pos = if dst_span == 0.0 {
            keep as f64
        } else {
            keep as f64 + (i - keep) as f64 * src_span / dst_span
        };
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 {
            out.row_mut(i).assign(&pe.row(lo));
        } else {
            let row = &pe.row(lo) * (1.0 - frac) + &pe.row(lo + 1) * frac;
            out.row_mut(i).assign(&row);
        }
    }
    Ok(out)
}
