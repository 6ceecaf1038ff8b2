use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::{HeadConfig, LossWeights};
use crate::vit::ViTConfig;

use super::crops::CropConfig;
use super::masks::MaskConfig;
use super::mix::MixSamplerConfig;
use super::schedule::ScheduleConfig;
use super::step::{GramTeacherPolicy, ObjectiveConfig};

/// Which training phase a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Pretrain,
    Refine,
    /// Mixed-resolution adaptation with Gram anchoring.
    Adapt,
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Refine => "refine",
            TrainPhase::Adapt => "hires-adapt",
        })
    }
}

impl FromStr for TrainPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainPhase::Pretrain),
            "refine" => Ok(TrainPhase::Refine),
            "hires-adapt" => Ok(TrainPhase::Adapt),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

/// Frozen-feature monitoring during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// 0 disables monitoring.
    pub every: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub knn_k: usize,
    pub radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { every: 0, train_size: 256, test_size: 256, knn_k: 10, radius: 1 }
    }
}

/// Every setting of a training run. Serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Divisor applied to the reference iteration counts.
    pub scale: u64,
    /// Steps run by one invocation of a phase.
    pub steps: u64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub image_size: usize,
    pub checkpoint_every: u64,
    pub vit: ViTConfig,
    pub dino_head: HeadConfig,
    pub ibot_head: HeadConfig,
    pub crops: CropConfig,
    pub masks: MaskConfig,
    pub schedule: ScheduleConfig,
    pub objective: ObjectiveConfig,
    pub gram: GramTeacherPolicy,
    pub mix: MixSamplerConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::scaled(100)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

impl TrainConfig {
    /// Phase defaults: refinement and adaptation add the Gram term.
    pub fn for_phase(phase: TrainPhase, scale: u64) -> Self {
        let mut cfg = Self::scaled(scale);
        if phase != TrainPhase::Pretrain {
            cfg.objective.weights = LossWeights::refine();
        }
        cfg
    }

    /// Defaults with every iteration-denominated constant divided by `scale`.
    pub fn scaled(scale: u64) -> Self {
        let scale = scale.max(1);
        let schedule = ScheduleConfig::scaled(scale);
        TrainConfig {
            seed: 0,
            scale,
            steps: schedule.total_steps,
            batch_size: 16,
            dataset_size: 1024,
            image_size: 64,
            checkpoint_every: 500,
            vit: ViTConfig::default(),
            dino_head: HeadConfig::default(),
            ibot_head: HeadConfig::default(),
            crops: CropConfig::default(),
            masks: MaskConfig::default(),
            schedule,
            objective: ObjectiveConfig::default(),
            gram: GramTeacherPolicy {
                source_checkpoint_step: 200_000 / scale,
                refresh_interval: 10_000 / scale,
                ..GramTeacherPolicy::default()
            },
            mix: MixSamplerConfig { p_homogeneous: 0.1, weights: vec![1.0] },
            eval: EvalConfig::default(),
        }
    }

    /// Build from `key = value` pairs. `scale` is applied first so explicit
    /// iteration counts override the derived ones regardless of order.
    /// Unknown keys are collected into one error.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        Self::from_pairs_for(TrainPhase::Pretrain, pairs)
    }

    /// Like [`TrainConfig::from_pairs`] starting from the phase defaults.
    pub fn from_pairs_for(phase: TrainPhase, pairs: &[(String, String)]) -> Result<Self> {
        let scale = match pairs.iter().rev().find(|(k, _)| k == "scale") {
            Some((k, v)) => parse(k, v)?,
            None => 100,
        };
        let mut cfg = Self::for_phase(phase, scale);
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            if k != "scale" && !cfg.set(k, v)? {
                unknown.push(k.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse the text form; `#` starts a comment line.
    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply one pair. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        if let Some(rest) = key.strip_prefix("vit.") {
            return self.vit.set(rest, v);
        }
        for (prefix, head) in [("dino_head.", &mut self.dino_head), ("ibot_head.", &mut self.ibot_head)] {
            if let Some(rest) = key.strip_prefix(prefix) {
                match rest {
                    "hidden_dim" => head.hidden_dim = parse(key, v)?,
                    "bottleneck_dim" => head.bottleneck_dim = parse(key, v)?,
                    "prototype_count" => head.prototype_count = parse(key, v)?,
                    _ => return Ok(false),
                }
                return Ok(true);
            }
        }
        let c = &mut self.crops;
        let s = &mut self.schedule;
        let o = &mut self.objective;
        let g = &mut self.gram;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "crops.n_global" => c.n_global = parse(key, v)?,
            "crops.n_local" => c.n_local = parse(key, v)?,
            "crops.global_size" => c.global_size = parse(key, v)?,
            "crops.local_size" => c.local_size = parse(key, v)?,
            "crops.global_scale_min" => c.global_scale.0 = parse(key, v)?,
            "crops.global_scale_max" => c.global_scale.1 = parse(key, v)?,
            "crops.local_scale_min" => c.local_scale.0 = parse(key, v)?,
            "crops.local_scale_max" => c.local_scale.1 = parse(key, v)?,
            "crops.flip_prob" => c.flip_prob = parse(key, v)?,
            "crops.brightness" => c.brightness = parse(key, v)?,
            "crops.contrast" => c.contrast = parse(key, v)?,
            "masks.prob" => self.masks.prob = parse(key, v)?,
            "masks.ratio_min" => self.masks.ratio.0 = parse(key, v)?,
            "masks.ratio_max" => self.masks.ratio.1 = parse(key, v)?,
            "schedule.base_lr" => s.base_lr = parse(key, v)?,
            "schedule.warmup_steps" => s.warmup_steps = parse(key, v)?,
            "schedule.total_steps" => s.total_steps = parse(key, v)?,
            "schedule.weight_decay" => s.weight_decay = parse(key, v)?,
            "schedule.layerwise_decay" => s.layerwise_decay = parse(key, v)?,
            "schedule.ema_momentum" => s.ema_momentum = parse(key, v)?,
            "schedule.teacher_temp_start" => s.teacher_temp_start = parse(key, v)?,
            "schedule.teacher_temp_end" => s.teacher_temp_end = parse(key, v)?,
            "loss.dino" => o.weights.dino = parse(key, v)?,
            "loss.ibot" => o.weights.ibot = parse(key, v)?,
            "loss.koleo" => o.weights.koleo = parse(key, v)?,
            "loss.gram" => o.weights.gram = parse(key, v)?,
            "loss.student_temp" => o.student_temp = parse(key, v)?,
            "loss.sinkhorn_iters" => o.sinkhorn_iters = parse(key, v)?,
            "loss.koleo_group" => o.koleo_group = parse(key, v)?,
            "gram.source_step" => g.source_checkpoint_step = parse(key, v)?,
            "gram.refresh_interval" => g.refresh_interval = parse(key, v)?,
            "gram.max_refreshes" => g.max_refreshes = parse(key, v)?,
            "gram.highres_factor" => g.highres_factor = parse(key, v)?,
            "gram.enabled" => g.enabled = parse(key, v)?,
            "mix.p_homogeneous" => self.mix.p_homogeneous = parse(key, v)?,
            "mix.weights" => {
                self.mix.weights = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(|x| parse(key, x))
                    .collect::<Result<_>>()?
            }
            "eval.every" => self.eval.every = parse(key, v)?,
            "eval.train_size" => self.eval.train_size = parse(key, v)?,
            "eval.test_size" => self.eval.test_size = parse(key, v)?,
            "eval.knn_k" => self.eval.knn_k = parse(key, v)?,
            "eval.radius" => self.eval.radius = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its resolved value, in canonical order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("scale".into(), self.scale.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("dataset_size".into(), self.dataset_size.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ];
        kv.extend(self.vit.to_kv("vit."));
        for (p, h) in [("dino_head.", &self.dino_head), ("ibot_head.", &self.ibot_head)] {
            kv.push((format!("{p}hidden_dim"), h.hidden_dim.to_string()));
            kv.push((format!("{p}bottleneck_dim"), h.bottleneck_dim.to_string()));
            kv.push((format!("{p}prototype_count"), h.prototype_count.to_string()));
        }
        let c = &self.crops;
        let s = &self.schedule;
        let o = &self.objective;
        let g = &self.gram;
        let rest: Vec<(&str, String)> = vec![
            ("crops.n_global", c.n_global.to_string()),
            ("crops.n_local", c.n_local.to_string()),
            ("crops.global_size", c.global_size.to_string()),
            ("crops.local_size", c.local_size.to_string()),
            ("crops.global_scale_min", f(c.global_scale.0)),
            ("crops.global_scale_max", f(c.global_scale.1)),
            ("crops.local_scale_min", f(c.local_scale.0)),
            ("crops.local_scale_max", f(c.local_scale.1)),
            ("crops.flip_prob", f(c.flip_prob)),
            ("crops.brightness", f(c.brightness)),
            ("crops.contrast", f(c.contrast)),
            ("masks.prob", f(self.masks.prob)),
            ("masks.ratio_min", f(self.masks.ratio.0)),
            ("masks.ratio_max", f(self.masks.ratio.1)),
            ("schedule.base_lr", f(s.base_lr)),
            ("schedule.warmup_steps", s.warmup_steps.to_string()),
            ("schedule.total_steps", s.total_steps.to_string()),
            ("schedule.weight_decay", f(s.weight_decay)),
            ("schedule.layerwise_decay", f(s.layerwise_decay)),
            ("schedule.ema_momentum", f(s.ema_momentum)),
            ("schedule.teacher_temp_start", f(s.teacher_temp_start)),
            ("schedule.teacher_temp_end", f(s.teacher_temp_end)),
            ("loss.dino", f(o.weights.dino)),
            ("loss.ibot", f(o.weights.ibot)),
            ("loss.koleo", f(o.weights.koleo)),
            ("loss.gram", f(o.weights.gram)),
            ("loss.student_temp", f(o.student_temp)),
            ("loss.sinkhorn_iters", o.sinkhorn_iters.to_string()),
            ("loss.koleo_group", o.koleo_group.to_string()),
            ("gram.source_step", g.source_checkpoint_step.to_string()),
            ("gram.refresh_interval", g.refresh_interval.to_string()),
            ("gram.max_refreshes", g.max_refreshes.to_string()),
            ("gram.highres_factor", g.highres_factor.to_string()),
            ("gram.enabled", g.enabled.to_string()),
            ("mix.p_homogeneous", f(self.mix.p_homogeneous)),
            ("mix.weights", self.mix.weights.iter().map(|w| f(*w)).collect::<Vec<_>>().join(",")),
            ("eval.every", self.eval.every.to_string()),
            ("eval.train_size", self.eval.train_size.to_string()),
            ("eval.test_size", self.eval.test_size.to_string()),
            ("eval.knn_k", self.eval.knn_k.to_string()),
            ("eval.radius", self.eval.radius.to_string()),
        ];
        kv.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.schedule.validate()?;
        self.objective.weights.validate()?;
        self.gram.validate()?;
        self.mix.validate(1 + self.mix.weights.len())?;
        let ps = self.vit.patch_size;
        let c = &self.crops;
        if c.n_global == 0 || c.global_size % ps != 0 || c.local_size % ps != 0 || c.local_size == 0 {
            return Err(Error::Config(format!(
                "crop sizes {} / {} must be positive multiples of patch size {ps} with at least one global crop",
                c.global_size, c.local_size
            )));
        }
        if self.image_size < c.global_size || self.image_size % ps != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of {ps} and at least the global crop size",
                self.image_size
            )));
        }
        if self.batch_size == 0 || self.dataset_size < 1 + self.mix.weights.len() {
            return Err(Error::Config("batch_size and dataset_size must cover every data part".into()));
        }
        if !(0.0 < self.masks.ratio.0 && self.masks.ratio.0 <= self.masks.ratio.1 && self.masks.ratio.1 < 1.0) {
            return Err(Error::Config("mask ratio bounds must satisfy 0 < min <= max < 1".into()));
        }
        if !(0.0..=1.0).contains(&self.masks.prob) {
            return Err(Error::Config("masks.prob outside [0, 1]".into()));
        }
        if self.objective.student_temp <= 0.0 || self.objective.sinkhorn_iters == 0 {
            return Err(Error::Config("student temperature and Sinkhorn iterations must be positive".into()));
        }
        if self.eval.every > 0 && (self.eval.knn_k == 0 || self.eval.radius == 0 || self.eval.train_size == 0 || self.eval.test_size == 0) {
            return Err(Error::Config("eval sizes, knn_k and radius must be positive".into()));
        }
        Ok(())
    }

    /// Backbone, head and data keys; these must agree between a checkpoint
    /// and any run that continues from it.
    pub fn architecture_kv(&self) -> Vec<(String, String)> {
        self.to_kv()
            .into_iter()
            .filter(|(k, _)| {
                k.starts_with("vit.") || k.starts_with("dino_head.") || k.starts_with("ibot_head.") || k == "seed"
            })
            .collect()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.objective.weights
    }
}

/// Split `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("malformed line `{line}`")))
        })
        .collect()
}
