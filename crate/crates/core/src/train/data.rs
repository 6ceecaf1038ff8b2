//! Procedural shapes dataset.
//!
//! Each image holds one to three coloured shapes (circle, square, triangle)
//! over a smooth textured background. The label is the multiset of shape
//! kinds, so there are 19 classes. A per-pixel map records which shape (if
//! any) covers each pixel.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const SHAPE_KINDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Every multiset of 1..=3 shape kinds, as `(circles, squares, triangles)`.
pub fn class_table() -> Vec<[u8; 3]> {
    let mut out = Vec::new();
    for total in 1..=3u8 {
        for c in (0..=total).rev() {
            for s in (0..=total - c).rev() {
                out.push([c, s, total - c - s]);
            }
        }
    }
    out
}

pub fn class_count() -> usize {
    class_table().len()
}

#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub size: usize,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    /// Per-pixel owner: 0 for background, `k + 1` for the k-th drawn shape.
    pub segments: Vec<Vec<u8>>,
}

impl ShapesDataset {
    /// `count` images of `size x size` pixels; image `i` depends only on `(seed, i)`.
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Self> {
        if size < 16 || count == 0 {
            return Err(Error::Config(format!("dataset needs count >= 1 and size >= 16, got {count} x {size}")));
        }
        let table = class_table();
        let mut ds = ShapesDataset { size, images: Vec::with_capacity(count), labels: Vec::with_capacity(count), segments: Vec::with_capacity(count) };
        for i in 0..count {
            let mut rng = stream_rng(seed, Stream::Data, i as u64);
            let (img, seg, kinds) = render(size, &mut rng);
            let mut counts = [0u8; 3];
            for k in kinds {
                counts[k as usize] += 1;
            }
            ds.labels.push(table.iter().position(|c| *c == counts).expect("class in table"));
            ds.images.push(img);
            ds.segments.push(seg);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn render(size: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Vec<u8>, Vec<ShapeKind>) {
    let mut px = vec![0f32; size * size * 3];
    // background: a few random low-frequency waves per channel plus pixel noise
    let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let waves: Vec<(f32, f32, f32, f32, usize)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.03..0.12),
                rng.gen_range(0..3),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut v = base[c];
                for &(fx, fy, ph, amp, ch) in &waves {
                    if ch == c {
                        v += amp * (fx * x as f32 + fy * y as f32 + ph).sin();
                    }
                }
                v += rng.gen_range(-0.06..0.06);
                px[(y * size + x) * 3 + c] = v;
            }
        }
    }

    let n_shapes = rng.gen_range(1..=3);
    let mut seg = vec![0u8; size * size];
    let mut kinds = Vec::with_capacity(n_shapes);
    let s = size as f32;
    for k in 0..n_shapes {
        let kind = match rng.gen_range(0..SHAPE_KINDS) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        kinds.push(kind);
        let r = rng.gen_range(0.12 * s..0.22 * s);
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in 0..size {
            for x in 0..size {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let inside = match kind {
                    ShapeKind::Circle => dx * dx + dy * dy <= r * r,
                    ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                    // upward triangle with apex at cy - r and base at cy + r
                    ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
                };
                if inside {
                    seg[y * size + x] = (k + 1) as u8;
                    for c in 0..3 {
                        px[(y * size + x) * 3 + c] = color[c] + rng.gen_range(-0.03..0.03);
                    }
                }
            }
        }
    }
    for v in &mut px {
        *v = (*v - 0.5) / 0.25;
    }
    (Tensor::new(vec![size, size, 3], px).expect("image"), seg, kinds)
}
