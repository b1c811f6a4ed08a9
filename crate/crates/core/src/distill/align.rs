//! Adaptive average pooling along the channel axis.

use std::ops::Range;

use ndarray::{s, Array4, ArrayView4, Axis, Zip};

use super::DistillError;

/// Input channels averaged into output channel `i`:
/// `[floor(i*C_in/C_out), ceil((i+1)*C_in/C_out))`.
pub fn pool_window(i: usize, c_in: usize, c_out: usize) -> Range<usize> {
    let start = i * c_in / c_out;
    let end = ((i + 1) * c_in).div_ceil(c_out);
    start..end
}

/// Pools `(B, C_in, H, W)` down to `(B, c_out, H, W)`; the identity when
/// `c_out == C_in`.
pub fn channel_align(a: ArrayView4<'_, f64>, c_out: usize) -> Result<Array4<f64>, DistillError> {
    let (b, c_in, h, w) = a.dim();
    if c_out == 0 {
        return Err(DistillError::Shape("cannot pool to zero channels".into()));
    }
    if c_out > c_in {
        return Err(DistillError::Upsample { c_in, c_out });
    }
    if c_out == c_in {
        return Ok(a.to_owned());
    }
    let mut out = Array4::<f64>::zeros((b, c_out, h, w));
    for i in 0..c_out {
        let win = pool_window(i, c_in, c_out);
        let inv = 1.0 / win.len() as f64;
        let mut dst = out.index_axis_mut(Axis(1), i);
        for c in win {
            dst += &a.index_axis(Axis(1), c);
        }
        dst *= inv;
    }
    Ok(out)
}

/// Transpose of [`channel_align`]: spreads `(B, c_out, H, W)` gradients back
/// over `c_in` input channels.
pub fn channel_align_adjoint(g: ArrayView4<'_, f64>, c_in: usize) -> Array4<f64> {
    let (b, c_out, h, w) = g.dim();
    if c_out == c_in {
        return g.to_owned();
    }
    let mut out = Array4::<f64>::zeros((b, c_in, h, w));
    for i in 0..c_out {
        let win = pool_window(i, c_in, c_out);
        let inv = 1.0 / win.len() as f64;
        let src = g.index_axis(Axis(1), i);
        for c in win {
            Zip::from(out.index_axis_mut(Axis(1), c))
                .and(&src)
                .for_each(|o, &v| *o += v * inv);
        }
    }
    out
}

/// Expands pooled `(B, c_out, H, W)` features back to `c_in` channels: each
/// input channel takes the mean of the pooled channels whose window covers it.
///
/// `channel_align(channel_unpool(x))` recovers `x` when `c_out` divides `c_in`.
pub fn channel_unpool(x: ArrayView4<'_, f64>, c_in: usize) -> Array4<f64> {
    let (b, c_out, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((b, c_in, h, w));
    let mut cover = vec![0usize; c_in];
    for i in 0..c_out {
        for c in pool_window(i, c_in, c_out) {
            cover[c] += 1;
            let mut dst = out.slice_mut(s![.., c, .., ..]);
            dst += &x.index_axis(Axis(1), i);
        }
    }
    for (c, n) in cover.into_iter().enumerate() {
        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v / n as f64);
    }
    out
}
