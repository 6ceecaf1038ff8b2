use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Homogeneous / heterogeneous batch mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSamplerConfig {
    pub p_homogeneous: f64,
    /// Weights of parts `1..` for heterogeneous batches.
    pub weights: Vec<f64>,
}

impl MixSamplerConfig {
    pub fn validate(&self, n_parts: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_homogeneous) {
            return Err(Error::Config(format!("p_homogeneous {} outside [0, 1]", self.p_homogeneous)));
        }
        if n_parts == 0 {
            return Err(Error::Config("mix sampler needs at least one part".into()));
        }
        if self.p_homogeneous < 1.0 {
            if self.weights.len() != n_parts - 1 {
                return Err(Error::Config(format!("{} weights for {} heterogeneous parts", self.weights.len(), n_parts - 1)));
            }
            let s: f64 = self.weights.iter().sum();
            if self.weights.iter().any(|w| *w < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config("heterogeneous weights must be non-negative and sum to 1".into()));
            }
        }
        Ok(())
    }
}

/// Sampled batch: `(part, index within part)` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDescriptor {
    pub homogeneous: bool,
    pub samples: Vec<(usize, usize)>,
}

/// Part 0 is the homogeneous high-quality part; the rest are mixed by weight.
pub fn next_batch(cfg: &MixSamplerConfig, parts: &[Vec<usize>], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<BatchDescriptor> {
    cfg.validate(parts.len())?;
    let homogeneous = rng.gen::<f64>() < cfg.p_homogeneous;
    let mut samples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let part = if homogeneous {
            0
        } else {
            let mut u = rng.gen::<f64>();
            let mut chosen = parts.len() - 1;
            for (i, w) in cfg.weights.iter().enumerate() {
                if u < *w {
                    chosen = i + 1;
                    break;
                }
                u -= w;
            }
            chosen
        };
        if parts[part].is_empty() {
            return Err(Error::invalid("next_batch", format!("selected part {part} is empty")));
        }
        samples.push((part, parts[part][rng.gen_range(0..parts[part].len())]));
    }
    Ok(BatchDescriptor { homogeneous, samples })
}
