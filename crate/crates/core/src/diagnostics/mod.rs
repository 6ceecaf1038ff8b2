//! Feature-map measurements, PCA rendering and frozen-feature probes.

mod image;
mod pca;
mod probe;

pub use image::{write_pgm, write_ppm};
pub use pca::{jacobi_eigen, pca_rgb, PcaImage, PCA_VARIANTS};
pub use probe::{knn_probe, linear_probe, LinearProbeConfig, ProbeResult};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::resize::bicubic_resize;
use crate::tensor::Tensor;

/// Where a feature map came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub checkpoint: String,
    pub layer: usize,
    pub resolution: usize,
    pub norm_applied: bool,
}

/// Patch features on an `h x w` grid, row-major, `d` values per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if h * w * d != data.len() || h == 0 || w == 0 || d == 0 {
            return Err(Error::invalid("FeatureMap", format!("{h}x{w}x{d} grid with {} values", data.len())));
        }
        Ok(FeatureMap { h, w, d, data, provenance })
    }

    /// From `[h * w, d]` patch rows.
    pub fn from_patches<S: Scalar>(patches: &Tensor<S>, grid: (usize, usize), provenance: Provenance) -> Result<Self> {
        let (_, d) = patches.rows_cols();
        FeatureMap::new(grid.0, grid.1, d, patches.data().iter().map(|v| v.f64()).collect(), provenance)
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

fn unit_rows(f: &FeatureMap) -> Vec<f64> {
    let mut out = f.data.clone();
    for row in out.chunks_mut(f.d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Cosine similarity of every patch with the patch at `(row, col)`.
pub fn cosine_map(f: &FeatureMap, reference: (usize, usize)) -> Result<Vec<f64>> {
    let (r, c) = reference;
    if r >= f.h || c >= f.w {
        return Err(Error::invalid("cosine_map", format!("reference {reference:?} outside {}x{} grid", f.h, f.w)));
    }
    let refv = f.patch(r * f.w + c);
    Ok((0..f.len()).map(|i| cosine(f.patch(i), refv)).collect())
}

/// Mean cosine between the CLS vector and every patch row.
pub fn cls_patch_cosine(cls: &[f64], patches: &FeatureMap) -> f64 {
    (0..patches.len()).map(|i| cosine(cls, patches.patch(i))).sum::<f64>() / patches.len() as f64
}

/// Mean over patches of (mean cosine to neighbours within Chebyshev radius
/// `r`) minus (mean cosine to patches at Chebyshev distance `>= 2r`).
pub fn locality_score(f: &FeatureMap, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::invalid("locality_score", "radius must be at least 1"));
    }
    let u = unit_rows(f);
    let d = f.d;
    let dot = |i: usize, j: usize| -> f64 { u[i * d..(i + 1) * d].iter().zip(&u[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum() };
    let mut total = 0.0;
    for y in 0..f.h {
        for x in 0..f.w {
            let i = y * f.w + x;
            let (mut near, mut nn, mut far, mut nf) = (0.0, 0usize, 0.0, 0usize);
            for yy in 0..f.h {
                for xx in 0..f.w {
                    let cheb = y.abs_diff(yy).max(x.abs_diff(xx));
                    if cheb == 0 {
                        continue;
                    }
                    let j = yy * f.w + xx;
                    if cheb <= r {
                        near += dot(i, j);
                        nn += 1;
                    } else if cheb >= 2 * r {
                        far += dot(i, j);
                        nf += 1;
                    }
                }
            }
            if nn == 0 || nf == 0 {
                return Err(Error::invalid(
                    "locality_score",
                    format!("{}x{} grid too small for radius {r} (patch {y},{x} lacks distance-{} partners)", f.h, f.w, 2 * r),
                ));
            }
            total += near / nn as f64 - far / nf as f64;
        }
    }
    Ok(total / f.len() as f64)
}

/// Bicubic resize of a `[h, w, d]` feature map to `out_h x out_w`, then
/// unit-length rows, flattened to `[out_h * out_w, d]`.
pub fn highres_smooth_map<S: Scalar>(map: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let d = map.shape()[2];
    let resized = if map.shape()[0] == out_h && map.shape()[1] == out_w { map.clone() } else { bicubic_resize(map, out_h, out_w)? };
    let mut data = resized.into_data();
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|&v| v * v).fold(S::zero(), |a, v| a + v).sqrt().max(S::c(1e-12));
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![out_h * out_w, d], data)
}

/// Downsample a feature map computed at `s` times the base resolution.
pub fn highres_smooth(f_hi: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 0 || f_hi.h % s != 0 || f_hi.w % s != 0 {
        return Err(Error::Geometry(format!("{}x{} grid not divisible by factor {s}", f_hi.h, f_hi.w)));
    }
    let (h, w) = (f_hi.h / s, f_hi.w / s);
    if s > 1 && (f_hi.h < 2 || f_hi.w < 2) {
        return Err(Error::Geometry("high-resolution grid must be at least 2x2".into()));
    }
    let t = Tensor::new(vec![f_hi.h, f_hi.w, f_hi.d], f_hi.data.clone())?;
    let out = highres_smooth_map(&t, h, w)?;
    FeatureMap::new(h, w, f_hi.d, out.into_data(), f_hi.provenance.clone())
}
