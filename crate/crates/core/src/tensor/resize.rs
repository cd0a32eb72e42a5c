use super::{gemm, ImageTensor, Real, Tensor};
use crate::error::{Error, Result};

/// Dense `(out_len, in_len)` row-major resampling matrix along one axis.
///
/// Half-pixel centers with clamp-to-edge. When shrinking with `antialias`,
/// each output sample is the area-weighted average of the input cells its
/// footprint overlaps; otherwise two-tap linear interpolation is used.
pub fn resample_matrix(in_len: usize, out_len: usize, antialias: bool) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == out_len {
        for i in 0..out_len {
            m[i * in_len + i] = 1.0;
        }
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    if antialias && out_len < in_len {
        for i in 0..out_len {
            let lo = i as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(in_len);
            for j in first..last {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                m[i * in_len + j] = overlap / scale;
            }
        }
    } else {
        let max = (in_len - 1) as f64;
        for i in 0..out_len {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let j0 = src.floor() as usize;
            let frac = src - j0 as f64;
            let j1 = (j0 + 1).min(in_len - 1);
            m[i * in_len + j0] += 1.0 - frac;
            m[i * in_len + j1] += frac;
        }
    }
    m
}

/// Resizes every channel of a `(C, H, W)` tensor.
pub fn resize_channels<T: Real>(
    t: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("zero-sized resize target {out_h}x{out_w}")));
    }
    t.ensure_finite("resize input")?;
    let rows: Vec<T> = resample_matrix(h, out_h, antialias).into_iter().map(T::lit).collect();
    let cols: Vec<T> = resample_matrix(w, out_w, antialias).into_iter().map(T::lit).collect();
    Ok(apply_separable(t.data(), c, h, w, &rows, out_h, &cols, out_w))
}

/// `out[c] = rows * x[c] * cols^T` for resampling matrices `rows (oh, h)` and
/// `cols (ow, w)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_separable<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    rows: &[T],
    oh: usize,
    cols: &[T],
    ow: usize,
) -> Tensor<T> {
    let mut tmp = vec![T::zero(); c * h * ow];
    gemm(c * h, w, ow, x, (w, 1), cols, (1, w), &mut tmp, (ow, 1), false);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        gemm(
            oh,
            h,
            ow,
            rows,
            (h, 1),
            &tmp[ch * h * ow..(ch + 1) * h * ow],
            (ow, 1),
            &mut out[ch * oh * ow..(ch + 1) * oh * ow],
            (ow, 1),
            false,
        );
    }
    Tensor::new([c, oh, ow], out).expect("sizes are consistent")
}

/// Resizes an RGB image; `antialias` switches shrinking to area averaging.
pub fn resize_bilinear<T: Real>(
    img: &ImageTensor<T>,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Result<ImageTensor<T>> {
    ImageTensor::new(resize_channels(img.tensor(), out_h, out_w, antialias)?)
}
