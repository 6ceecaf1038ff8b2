//! Separable bicubic resampling of `h x w x d` feature maps.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Catmull-Rom kernel (`a = -0.5`).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Interpolation taps for one output coordinate: (source index, weight).
///
/// Uses half-pixel centres and clamps out-of-range taps to the border.
fn taps(out_len: usize, in_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut t = [(0usize, 0.0f64); 4];
            for (k, slot) in t.iter_mut().enumerate() {
                let offset = k as i64 - 1;
                let idx = (base as i64 + offset).clamp(0, in_len as i64 - 1) as usize;
                *slot = (idx, cubic(frac - offset as f64));
            }
            t
        })
        .collect()
}

/// Resize an `h x w x d` map to `out_h x out_w x d`.
///
/// Identity sizes return the input unchanged.
pub fn bicubic_resize<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let &[h, w, d] = x.shape() else {
        return Err(Error::invalid("bicubic_resize", format!("expected h x w x d, got {:?}", x.shape())));
    };
    if out_h < 1 || out_w < 1 {
        return Err(Error::invalid("bicubic_resize", format!("target {out_h}x{out_w}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid("bicubic_resize", format!("source {h}x{w} too small")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    // rows first: h x w x d -> out_h x w x d
    let row_taps = taps(out_h, h);
    let mut mid = vec![0.0f64; out_h * w * d];
    for (o, t) in row_taps.iter().enumerate() {
        for &(i, wt) in t {
            if wt == 0.0 {
                continue;
            }
            let srow = &src[i * w * d..(i + 1) * w * d];
            let drow = &mut mid[o * w * d..(o + 1) * w * d];
            for (dv, sv) in drow.iter_mut().zip(srow) {
                *dv += wt * sv.f64();
            }
        }
    }
    let col_taps = taps(out_w, w);
    let mut out = vec![S::zero(); out_h * out_w * d];
    for r in 0..out_h {
        for (o, t) in col_taps.iter().enumerate() {
            let dst = &mut out[(r * out_w + o) * d..(r * out_w + o + 1) * d];
            let mut acc = vec![0.0f64; d];
            for &(j, wt) in t {
                let s = &mid[(r * w + j) * d..(r * w + j + 1) * d];
                for c in 0..d {
                    acc[c] += wt * s[c];
                }
            }
            for c in 0..d {
                dst[c] = S::c(acc[c]);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, d], out)
}
