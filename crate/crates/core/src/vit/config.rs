use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the backbone mitigates high-norm patch outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierStrategy {
    /// Extra learned register tokens in the sequence.
    Registers,
    /// Learned key and value slots appended to every attention call.
    AttentionBias,
    /// Learned value bias added to the attention output.
    ValueGating,
    None,
}

impl fmt::Display for OutlierStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutlierStrategy::Registers => "registers",
            OutlierStrategy::AttentionBias => "attention_bias",
            OutlierStrategy::ValueGating => "value_gating",
            OutlierStrategy::None => "none",
        })
    }
}

impl FromStr for OutlierStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "registers" => Ok(OutlierStrategy::Registers),
            "attention_bias" => Ok(OutlierStrategy::AttentionBias),
            "value_gating" => Ok(OutlierStrategy::ValueGating),
            "none" => Ok(OutlierStrategy::None),
            other => Err(Error::Config(format!("unknown outlier strategy `{other}`"))),
        }
    }
}

/// Crop type; selects the output layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropKind {
    Global,
    Local,
}

/// Backbone hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub ffn_hidden_dim: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub register_count: usize,
    pub rope_jitter_range: (f64, f64),
    pub rope_base: f64,
    pub outlier_strategy: OutlierStrategy,
    pub stochastic_depth_rate: f64,
    pub separate_output_norms: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            depth: 4,
            embed_dim: 64,
            ffn_hidden_dim: 128,
            head_count: 4,
            head_dim: 16,
            patch_size: 8,
            in_channels: 3,
            register_count: 4,
            rope_jitter_range: (0.5, 2.0),
            rope_base: 100.0,
            outlier_strategy: OutlierStrategy::Registers,
            stochastic_depth_rate: 0.0,
            separate_output_norms: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.head_count == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return fail("depth, head_count, patch_size and in_channels must be positive".into());
        }
        if self.embed_dim != self.head_count * self.head_dim {
            return fail(format!(
                "embed_dim {} != head_count {} x head_dim {}",
                self.embed_dim, self.head_count, self.head_dim
            ));
        }
        if self.head_dim % 4 != 0 {
            return fail(format!("head_dim {} must be divisible by 4 for axial RoPE", self.head_dim));
        }
        if self.ffn_hidden_dim == 0 {
            return fail("ffn_hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return fail(format!("stochastic_depth_rate {} outside [0, 1)", self.stochastic_depth_rate));
        }
        let (lo, hi) = self.rope_jitter_range;
        if !(lo > 0.0 && lo <= hi) {
            return fail(format!("rope_jitter_range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if !(self.rope_base > 1.0) {
            return fail("rope_base must exceed 1".into());
        }
        Ok(())
    }

    /// Number of tokens for an `h x w` input: CLS + registers + patches.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        1 + self.register_count + (h / self.patch_size) * (w / self.patch_size)
    }

    /// Canonical `key = value` lines, keys prefixed with `prefix`.
    pub fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        let k = |s: &str| format!("{prefix}{s}");
        vec![
            (k("depth"), self.depth.to_string()),
            (k("embed_dim"), self.embed_dim.to_string()),
            (k("ffn_hidden_dim"), self.ffn_hidden_dim.to_string()),
            (k("head_count"), self.head_count.to_string()),
            (k("head_dim"), self.head_dim.to_string()),
            (k("patch_size"), self.patch_size.to_string()),
            (k("in_channels"), self.in_channels.to_string()),
            (k("register_count"), self.register_count.to_string()),
            (k("rope_jitter_min"), format!("{:?}", self.rope_jitter_range.0)),
            (k("rope_jitter_max"), format!("{:?}", self.rope_jitter_range.1)),
            (k("rope_base"), format!("{:?}", self.rope_base)),
            (k("outlier_strategy"), self.outlier_strategy.to_string()),
            (k("stochastic_depth_rate"), format!("{:?}", self.stochastic_depth_rate)),
            (k("separate_output_norms"), self.separate_output_norms.to_string()),
        ]
    }

    /// Apply one `key = value` pair (key without prefix). Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "depth" => self.depth = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "ffn_hidden_dim" => self.ffn_hidden_dim = p(key, value)?,
            "head_count" => self.head_count = p(key, value)?,
            "head_dim" => self.head_dim = p(key, value)?,
            "patch_size" => self.patch_size = p(key, value)?,
            "in_channels" => self.in_channels = p(key, value)?,
            "register_count" => self.register_count = p(key, value)?,
            "rope_jitter_min" => self.rope_jitter_range.0 = p(key, value)?,
            "rope_jitter_max" => self.rope_jitter_range.1 = p(key, value)?,
            "rope_base" => self.rope_base = p(key, value)?,
            "outlier_strategy" => self.outlier_strategy = value.parse()?,
            "stochastic_depth_rate" => self.stochastic_depth_rate = p(key, value)?,
            "separate_output_norms" => self.separate_output_norms = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
