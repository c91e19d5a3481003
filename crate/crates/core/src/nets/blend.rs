use jigwm_autograd::{PixelMask, Scalar, Var};

use crate::image::Image;
use crate::jigsaw::JigsawKey;
use crate::{Error, Result};

/// Pixels within `width` of an internal block boundary. A boundary at row
/// `b` covers rows `b - width .. b + width`; columns likewise.
pub fn edge_mask(height: usize, width: usize, grid: (usize, usize), band: usize) -> Result<PixelMask> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
        return Err(Error::Dimension(format!("{height}x{width} does not divide into a {rows}x{cols} grid")));
    }
    let near = |pos: usize, len: usize, parts: usize| {
        let step = len / parts;
        (1..parts).any(|k| {
            let b = k * step;
            pos + band >= b && pos < b + band
        })
    };
    let bits = (0..height * width)
        .map(|i| near(i / width, height, rows) || near(i % width, width, cols))
        .collect();
    Ok(PixelMask::new(height, width, bits))
}

/// Takes `x` on the boundary bands of the key's grid and `x_w` elsewhere.
pub fn blend_edges<T: Scalar>(x: &Image<T>, x_w: &Image<T>, key: &JigsawKey, band: usize) -> Result<Image<T>> {
    x.same_shape(x_w)?;
    let mask = edge_mask(x.height(), x.width(), key.grid(), band)?;
    let plane = x.plane();
    let data = x
        .data()
        .iter()
        .zip(x_w.data())
        .enumerate()
        .map(|(i, (&a, &b))| if mask.bits[i % plane] { a } else { b })
        .collect();
    Image::new(x.height(), x.width(), data)
}

/// Tape version of [`blend_edges`] over NCHW batches.
pub fn blend_edges_var<'g, T: Scalar>(x: Var<'g, T>, x_w: Var<'g, T>, mask: &PixelMask) -> Var<'g, T> {
    x.masked_merge(x_w, mask)
}
