use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-crop sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Crop area as a fraction of the image area.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive shift range, in pixel units of the `[0, 1]` range.
    pub brightness: f64,
    /// Multiplicative range around the crop mean.
    pub contrast: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            n_global: 2,
            n_local: 8,
            global_size: 32,
            local_size: 16,
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

/// Where a crop came from and how it was coloured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGeom {
    pub y0: f64,
    pub x0: f64,
    pub side: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

/// Crops of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub globals: Vec<Tensor<f32>>,
    pub locals: Vec<Tensor<f32>>,
    pub global_geom: Vec<CropGeom>,
    pub local_geom: Vec<CropGeom>,
}

fn random_geom(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: (f64, f64), cfg: &CropConfig) -> CropGeom {
    let area = (h * w) as f64 * rng.gen_range(scale.0..=scale.1);
    let side = area.sqrt().min(h.min(w) as f64);
    let y0 = rng.gen_range(0.0..=(h as f64 - side));
    let x0 = rng.gen_range(0.0..=(w as f64 - side));
    CropGeom {
        y0,
        x0,
        side,
        flip: rng.gen::<f64>() < cfg.flip_prob,
        brightness: rng.gen_range(-cfg.brightness..=cfg.brightness),
        contrast: rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast),
    }
}

/// Resample the square region `geom` of `image` to `out x out` (bilinear), then flip and colour-jitter.
pub fn render_crop(image: &Tensor<f32>, geom: &CropGeom, out: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Geometry(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    if out == 0 {
        return Err(Error::Geometry("crop size must be positive".into()));
    }
    let src = image.data();
    let step = geom.side / out as f64;
    let mut px = vec![0f32; out * out * c];
    for i in 0..out {
        let sy = (geom.y0 + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..out {
            let jj = if geom.flip { out - 1 - j } else { j };
            let sx = (geom.x0 + (jj as f64 + 0.5) * step - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                px[(i * out + j) * c + ch] = v as f32;
            }
        }
    }
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
    // images are stored as (v - 0.5) / 0.25, so a pixel-unit shift is 4x larger
    let shift = 4.0 * geom.brightness;
    for v in &mut px {
        *v = ((*v as f64 - mean) * geom.contrast + mean + shift) as f32;
    }
    Tensor::new(vec![out, out, c], px)
}

/// Sample `n_global` global and `n_local` local crops of `image`.
pub fn sample_crops(image: &Tensor<f32>, cfg: &CropConfig, rng: &mut ChaCha8Rng) -> Result<CropSet> {
    let &[h, w, _] = image.shape() else {
        return Err(Error::Geometry(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    if h < cfg.global_size || w < cfg.global_size {
        return Err(Error::Geometry(format!("image {h}x{w} smaller than global crop {}", cfg.global_size)));
    }
    let mut set = CropSet { globals: vec![], locals: vec![], global_geom: vec![], local_geom: vec![] };
    for _ in 0..cfg.n_global {
        let geom = random_geom(rng, h, w, cfg.global_scale, cfg);
        set.globals.push(render_crop(image, &geom, cfg.global_size)?);
        set.global_geom.push(geom);
    }
    for _ in 0..cfg.n_local {
        let geom = random_geom(rng, h, w, cfg.local_scale, cfg);
        set.locals.push(render_crop(image, &geom, cfg.local_size)?);
        set.local_geom.push(geom);
    }
    Ok(set)
}

/// One `(global, local, gram teacher)` crop-size triple of the mixed-resolution phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolutionTriple {
    pub global: usize,
    pub local: usize,
    pub gram: usize,
    pub prob: f64,
}

/// Mixed-resolution table at toy scale: the reference sizes divided by 8
/// and rounded to the 8-pixel patch grid.
pub fn adaptation_triples() -> Vec<ResolutionTriple> {
    let t = |global, local, gram, prob| ResolutionTriple { global, local, gram, prob };
    vec![
        t(64, 16, 96, 0.3),
        t(96, 16, 144, 0.3),
        t(96, 24, 144, 0.3),
        t(96, 32, 144, 0.05),
        t(96, 40, 144, 0.05),
    ]
}

/// Draw one entry of `table` by its probabilities.
pub fn sample_triple(table: &[ResolutionTriple], rng: &mut ChaCha8Rng) -> ResolutionTriple {
    let total: f64 = table.iter().map(|t| t.prob).sum();
    let mut u = rng.gen::<f64>() * total;
    for t in table {
        if u < t.prob {
            return *t;
        }
        u -= t.prob;
    }
    *table.last().expect("non-empty table")
}
