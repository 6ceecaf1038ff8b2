use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::vit::{sample_drop_path, sample_jitter};

use super::crops::{render_crop, sample_crops, CropConfig, CropGeom};
use super::masks::{sample_mask_plan, MaskConfig};

/// Multi-crop views of one training batch, image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CropBatch {
    pub image_ids: Vec<usize>,
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// `n_images * n_global` crops; crop `g` of image `i` is at `i * n_global + g`.
    pub globals: Vec<Tensor<f32>>,
    /// `n_images * n_local` crops.
    pub locals: Vec<Tensor<f32>>,
    /// One patch plan per global crop.
    pub masks: Vec<Vec<bool>>,
    pub global_geom: Vec<CropGeom>,
    pub local_geom: Vec<CropGeom>,
    /// Global crops re-rendered at `gram_size` pixels for the Gram teacher.
    pub gram_globals: Option<Vec<Tensor<f32>>>,
    pub gram_size: usize,
    /// RoPE box scales for the student global and local forwards.
    pub jitter: (f64, f64),
    /// Stochastic-depth keep flags `[depth][crop]` for the global and local forwards.
    pub drop_global: Option<Vec<Vec<bool>>>,
    pub drop_local: Option<Vec<Vec<bool>>>,
}

impl CropBatch {
    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }
}

/// Student-side randomness that is not part of the crops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentNoise {
    pub jitter_range: Option<(f64, f64)>,
    pub depth: usize,
    pub drop_rate: f64,
}

/// Build the batch of `step` from `images`; all randomness derives from `(master, step)`.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    images: &[&Tensor<f32>],
    image_ids: Vec<usize>,
    crops: &CropConfig,
    masks: &MaskConfig,
    patch_size: usize,
    gram_size: Option<usize>,
    noise: StudentNoise,
    master: u64,
    step: u64,
) -> Result<CropBatch> {
    if images.is_empty() || images.len() != image_ids.len() {
        return Err(Error::invalid("build_batch", "image list and ids must be non-empty and aligned"));
    }
    if crops.global_size % patch_size != 0 || crops.local_size % patch_size != 0 {
        return Err(Error::Geometry(format!(
            "crop sizes {} / {} not divisible by patch size {patch_size}",
            crops.global_size, crops.local_size
        )));
    }
    let mut crop_rng = stream_rng(master, Stream::Crops, step);
    let mut mask_rng = stream_rng(master, Stream::Masks, step);
    let gp = (crops.global_size / patch_size).pow(2);
    let mut b = CropBatch {
        image_ids,
        n_global: crops.n_global,
        n_local: crops.n_local,
        global_size: crops.global_size,
        local_size: crops.local_size,
        globals: vec![],
        locals: vec![],
        masks: vec![],
        global_geom: vec![],
        local_geom: vec![],
        gram_globals: None,
        gram_size: gram_size.unwrap_or(crops.global_size),
        jitter: (1.0, 1.0),
        drop_global: None,
        drop_local: None,
    };
    let mut gram = Vec::new();
    for img in images {
        let set = sample_crops(img, crops, &mut crop_rng)?;
        if let Some(size) = gram_size {
            if size < crops.global_size || size % patch_size != 0 {
                return Err(Error::Config(format!("Gram crop size {size} must be a multiple of {patch_size} and at least the global size")));
            }
            for geom in &set.global_geom {
                gram.push(render_crop(img, geom, size)?);
            }
        }
        b.globals.extend(set.globals);
        b.locals.extend(set.locals);
        b.global_geom.extend(set.global_geom);
        b.local_geom.extend(set.local_geom);
        for _ in 0..crops.n_global {
            b.masks.push(sample_mask_plan(&mut mask_rng, gp, masks));
        }
    }
    if gram_size.is_some() {
        b.gram_globals = Some(gram);
    }
    if let Some(range) = noise.jitter_range {
        let mut rng = stream_rng(master, Stream::Jitter, step);
        b.jitter = (sample_jitter(&mut rng, range), sample_jitter(&mut rng, range));
    }
    if noise.drop_rate > 0.0 {
        let mut rng = stream_rng(master, Stream::Dropout, step);
        b.drop_global = Some(sample_drop_path(&mut rng, noise.depth, b.globals.len(), noise.drop_rate));
        b.drop_local = Some(sample_drop_path(&mut rng, noise.depth, b.locals.len(), noise.drop_rate));
    }
    Ok(b)
}
