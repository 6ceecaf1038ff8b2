use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::write_atomic;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary RGB image from `h * w * 3` values in `[0, 1]`.
pub fn write_ppm(path: &Path, h: usize, w: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != h * w * 3 {
        return Err(Error::invalid("write_ppm", format!("{} values for {h}x{w}x3", rgb.len())));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(rgb.iter().map(|&v| to_byte(v)));
    write_atomic(path, &bytes)
}

/// Binary greyscale image; values are min-max scaled unless `range` is given.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64], range: Option<(f64, f64)>) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::invalid("write_pgm", format!("{} values for {h}x{w}", values.len())));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| to_byte((v - lo) / span)));
    write_atomic(path, &bytes)
}
