use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Masking of student global crops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Probability that a global crop is masked at all.
    pub prob: f64,
    /// Range of the masked fraction for a masked crop.
    pub ratio: (f64, f64),
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { prob: 0.5, ratio: (0.1, 0.5) }
    }
}

/// Bounds on the masked-patch count so the realized fraction stays inside `ratio`.
pub fn mask_count_bounds(n_patches: usize, ratio: (f64, f64)) -> (usize, usize) {
    let lo = ((ratio.0 * n_patches as f64).ceil() as usize).max(1);
    let hi = ((ratio.1 * n_patches as f64).floor() as usize).max(lo).min(n_patches);
    (lo, hi)
}

/// Boolean plan over `n_patches`; all false when the crop is left unmasked.
pub fn sample_mask_plan(rng: &mut ChaCha8Rng, n_patches: usize, cfg: &MaskConfig) -> Vec<bool> {
    let mut plan = vec![false; n_patches];
    if rng.gen::<f64>() >= cfg.prob {
        return plan;
    }
    let frac = rng.gen_range(cfg.ratio.0..=cfg.ratio.1);
    let (lo, hi) = mask_count_bounds(n_patches, cfg.ratio);
    let count = ((frac * n_patches as f64).round() as usize).clamp(lo, hi);
    for i in sample(rng, n_patches, count) {
        plan[i] = true;
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn bounds_for_sixteen_patches() {
        assert_eq!(mask_count_bounds(16, (0.1, 0.5)), (2, 8));
        assert_eq!(mask_count_bounds(4, (0.1, 0.5)), (1, 2));
    }

    #[test]
    fn masked_fraction_stays_in_range() {
        let mut rng = stream_rng(5, Stream::Masks, 0);
        for n in [4, 9, 16, 36] {
            for _ in 0..200 {
                let p = sample_mask_plan(&mut rng, n, &MaskConfig::default());
                let k = p.iter().filter(|&&m| m).count();
                if k > 0 {
                    let f = k as f64 / n as f64;
                    assert!((0.1..=0.5).contains(&f), "{k}/{n}");
                }
            }
        }
    }
}
