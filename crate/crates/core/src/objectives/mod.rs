//! Self-supervised loss terms, their targets and the weighted composites.

mod head;
mod losses;
mod sinkhorn;

pub use head::{HeadConfig, ProjectionHead};
pub use losses::{dino_loss, dino_pairs, gram_loss, ibot_loss, koleo_loss, masked_positions, IbotTerm, KOLEO_EPS};
pub use sinkhorn::{sinkhorn_knopp, sinkhorn_trace};

use crate::error::{Error, Result};

/// Training phase selecting the loss profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Refine,
}

/// Per-term loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub gram: f64,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        LossWeights { dino: 1.0, ibot: 1.0, koleo: 0.1, gram: 0.0 }
    }

    pub fn refine() -> Self {
        LossWeights { gram: 2.0, ..Self::pretrain() }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Refine => Self::refine(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.dino, self.ibot, self.koleo, self.gram];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Component losses of one step and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub step: u64,
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub gram: f64,
    pub total: f64,
}

impl LossReport {
    /// Recompute `total` from the components.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.dino * self.dino + w.ibot * self.ibot + w.koleo * self.koleo + w.gram * self.gram
    }
}

/// Weighted sum of the components for `phase`.
///
/// Pre-training ignores the Gram term; refinement requires a Gram teacher.
pub fn composite_loss(report: &LossReport, weights: &LossWeights, phase: Phase, has_gram_teacher: bool) -> Result<f64> {
    weights.validate()?;
    match phase {
        Phase::Pretrain => Ok(report.weighted_total(&LossWeights { gram: 0.0, ..*weights })),
        Phase::Refine if !has_gram_teacher => Err(Error::Config("refinement requires a Gram teacher".into())),
        Phase::Refine => Ok(report.weighted_total(weights)),
    }
}
