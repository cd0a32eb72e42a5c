use super::{FeatureMap, Real, Tensor};
use crate::error::{Error, Result};

/// Lays a `(N, C)` token list out as a `(C, H, W)` grid; token `i` lands in
/// cell `(i / W, i % W)`.
pub fn tokens_to_grid<T: Real>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<FeatureMap<T>> {
    let (n, c) = tokens.dims2()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot fill a {h}x{w} grid")));
    }
    FeatureMap::new(tokens.transpose()?.reshape([c, h, w])?)
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Real>(fm: &FeatureMap<T>) -> Tensor<T> {
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let flat = fm.tensor().clone().reshape([c, h * w]).expect("grid is 3-D");
    flat.transpose().expect("flat is 2-D")
}
