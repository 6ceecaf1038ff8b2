use crate::error::{Error, Result};

/// Optimization constants. Every iteration count is already in toy steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub layerwise_decay: f64,
    pub ema_momentum: f64,
    pub total_steps: u64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 4e-4,
            warmup_steps: 1000,
            weight_decay: 0.04,
            layerwise_decay: 0.98,
            ema_momentum: 0.999,
            total_steps: 10_000,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
        }
    }
}

impl ScheduleConfig {
    /// Reference iteration counts divided by `scale`.
    pub fn scaled(scale: u64) -> Self {
        let scale = scale.max(1);
        ScheduleConfig { warmup_steps: 100_000 / scale, total_steps: 1_000_000 / scale, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps)));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!("ema_momentum {} outside (0, 1)", self.ema_momentum)));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return Err(Error::Config("learning rate, weight decay or layer decay out of range".into()));
        }
        if !(self.teacher_temp_start > 0.0 && self.teacher_temp_end > 0.0) {
            return Err(Error::Config("teacher temperatures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub teacher_temp: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

/// Linear warmup of learning rate and teacher temperature, constant afterwards.
pub fn schedule(step: u64, cfg: &ScheduleConfig) -> ScheduleValues {
    let ramp = if cfg.warmup_steps == 0 { 1.0 } else { (step as f64 / cfg.warmup_steps as f64).min(1.0) };
    ScheduleValues {
        lr: cfg.base_lr * ramp,
        teacher_temp: cfg.teacher_temp_start + (cfg.teacher_temp_end - cfg.teacher_temp_start) * ramp,
        weight_decay: cfg.weight_decay,
        momentum: cfg.ema_momentum,
    }
}

/// Learning rate of a parameter at `layer` in a stack whose top is `top`.
pub fn layer_lr(lr: f64, decay: f64, top: usize, layer: usize) -> f64 {
    lr * decay.powi(top.saturating_sub(layer) as i32)
}
