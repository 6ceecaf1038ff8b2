//! Tiny vision transformer backbone.
//!
//! Token order inside every sequence is `[cls, registers.., patches..]`.
//! Blocks are pre-norm with a SwiGLU feed-forward. Positions enter only
//! through axial RoPE on queries and keys; CLS and register tokens get the
//! identity rotation.

mod config;
pub mod rope;

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use config::{CropKind, OutlierStrategy, ViTConfig};

use crate::error::{Error, Result};
use crate::nn::{linear, trunc_normal, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{io, AttentionSpec, AttentionVariant, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub ln1: (usize, usize),
    pub qkv: (usize, usize),
    pub key_bias: Option<usize>,
    pub value_bias: Option<usize>,
    pub proj: (usize, usize),
    pub ln2: (usize, usize),
    pub fc1: (usize, usize),
    pub fc2: (usize, usize),
}

/// Indices of every backbone tensor inside [`ViTState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ViTLayout {
    pub patch_embed: (usize, usize),
    pub cls_token: usize,
    pub registers: Option<usize>,
    pub mask_token: usize,
    pub blocks: Vec<BlockLayout>,
    pub norm_global: (usize, usize),
    pub norm_local: Option<(usize, usize)>,
}

/// Learnable state of one backbone (student, EMA teacher or Gram teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct ViTState<S: Scalar = f32> {
    pub config: ViTConfig,
    pub params: ParamSet<S>,
    pub layout: ViTLayout,
}

/// Per-call forward settings.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub crop_kind: Option<CropKind>,
    /// One boolean per patch per image; `true` replaces the patch with the mask token.
    pub masks: Option<&'a [Vec<bool>]>,
    /// RoPE box scale; `None` means 1.
    pub jitter_scale: Option<f64>,
    /// Per-block, per-image keep flags for stochastic depth.
    pub drop_path: Option<&'a [Vec<bool>]>,
    /// Record pre-norm patch tokens after every block.
    pub taps: bool,
}

/// Graph handles produced by [`forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// `[n, D]`
    pub cls: Var,
    /// `[n * R, D]` when registers exist.
    pub registers: Option<Var>,
    /// `[n * P, D]`, image-major.
    pub patches: Var,
    /// Pre-norm patch tokens after each block, each `[n * P, D]`.
    pub taps: Vec<Var>,
    pub grid: (usize, usize),
    pub n: usize,
}

/// Concrete output of a single-image forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput<S: Scalar = f32> {
    pub cls: Vec<S>,
    pub registers: Tensor<S>,
    pub patches: Tensor<S>,
    pub taps: Vec<Tensor<S>>,
    pub grid: (usize, usize),
}

impl<S: Scalar> ViTState<S> {
    /// Fresh parameters: truncated-normal linears, unit layer norms, zero biases.
    pub fn init(config: ViTConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let f = config.ffn_hidden_dim;
        let pin = config.patch_size * config.patch_size * config.in_channels;
        let mut p = ParamSet::new();
        let ln = |p: &mut ParamSet<S>, name: &str| {
            (
                p.push(format!("{name}.weight"), Tensor::full(vec![d], S::one())),
                p.push(format!("{name}.bias"), Tensor::zeros(vec![d])),
            )
        };
        let patch_embed = (
            p.push("patch_embed.weight", trunc_normal(rng, &[pin, d], INIT_STD)),
            p.push("patch_embed.bias", Tensor::zeros(vec![d])),
        );
        let cls_token = p.push("cls_token", trunc_normal(rng, &[1, d], INIT_STD));
        let registers = (config.register_count > 0)
            .then(|| p.push("registers", trunc_normal(rng, &[config.register_count, d], INIT_STD)));
        let mask_token = p.push("mask_token", Tensor::zeros(vec![1, d]));
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let pre = format!("blocks.{b}");
            let ln1 = ln(&mut p, &format!("{pre}.norm1"));
            let qkv = (
                p.push(format!("{pre}.attn.qkv.weight"), trunc_normal(rng, &[d, 3 * d], INIT_STD)),
                p.push(format!("{pre}.attn.qkv.bias"), Tensor::zeros(vec![3 * d])),
            );
            let key_bias = (config.outlier_strategy == OutlierStrategy::AttentionBias)
                .then(|| p.push(format!("{pre}.attn.key_bias"), Tensor::zeros(vec![d])));
            let value_bias = matches!(config.outlier_strategy, OutlierStrategy::AttentionBias | OutlierStrategy::ValueGating)
                .then(|| p.push(format!("{pre}.attn.value_bias"), Tensor::zeros(vec![d])));
            let proj = (
                p.push(format!("{pre}.attn.proj.weight"), trunc_normal(rng, &[d, d], INIT_STD)),
                p.push(format!("{pre}.attn.proj.bias"), Tensor::zeros(vec![d])),
            );
            let ln2 = ln(&mut p, &format!("{pre}.norm2"));
            let fc1 = (
                p.push(format!("{pre}.mlp.fc1.weight"), trunc_normal(rng, &[d, 2 * f], INIT_STD)),
                p.push(format!("{pre}.mlp.fc1.bias"), Tensor::zeros(vec![2 * f])),
            );
            let fc2 = (
                p.push(format!("{pre}.mlp.fc2.weight"), trunc_normal(rng, &[f, d], INIT_STD)),
                p.push(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(vec![d])),
            );
            blocks.push(BlockLayout { ln1, qkv, key_bias, value_bias, proj, ln2, fc1, fc2 });
        }
        let norm_global = ln(&mut p, "norm_global");
        let norm_local = config.separate_output_norms.then(|| ln(&mut p, "norm_local"));
        Ok(ViTState {
            config,
            params: p,
            layout: ViTLayout { patch_embed, cls_token, registers, mask_token, blocks, norm_global, norm_local },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Depth index used for layer-wise learning-rate decay: 0 for embeddings
    /// and tokens, `b + 1` for block `b`, `depth + 1` for the output norms.
    pub fn param_depth(&self, index: usize) -> usize {
        let name = self.params.name(index);
        if let Some(rest) = name.strip_prefix("blocks.") {
            let b: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            b + 1
        } else if name.starts_with("norm_") {
            self.config.depth + 1
        } else {
            0
        }
    }

    pub fn cast<T: Scalar>(&self) -> ViTState<T> {
        ViTState { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Write the tensors to `path` and the configuration to `path` + `.cfg`.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(path, &self.params.to_named(""))?;
        io::write_atomic(&cfg_path(path), config_text(&self.config).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(cfg_path(path)).map_err(|e| Error::io(cfg_path(path), e))?;
        let config = parse_config_text(&text)?;
        let mut state = ViTState::init(config, &mut crate::rng::stream_rng(0, crate::rng::Stream::Init, 0))?;
        state.params.load_named("", &io::load(path)?)?;
        Ok(state)
    }

    /// Untraced single-image forward. `layer_taps` records every block's patch tokens.
    pub fn forward(
        &self,
        image: &Tensor<S>,
        crop_kind: CropKind,
        mask: Option<&[bool]>,
        jitter_scale: Option<f64>,
    ) -> Result<BackboneOutput<S>> {
        let masks = mask.map(|m| vec![m.to_vec()]);
        let opts = ForwardOptions {
            crop_kind: Some(crop_kind),
            masks: masks.as_deref(),
            jitter_scale,
            drop_path: None,
            taps: true,
        };
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let out = forward_graph(&mut g, self, &vars, std::slice::from_ref(image), &opts)?;
        Ok(BackboneOutput {
            cls: g.value(out.cls).data().to_vec(),
            registers: match out.registers {
                Some(r) => g.value(r).clone(),
                None => Tensor::zeros(vec![0, self.config.embed_dim]),
            },
            patches: g.value(out.patches).clone(),
            taps: out.taps.iter().map(|t| g.value(*t).clone()).collect(),
            grid: out.grid,
        })
    }

    /// Patch tokens of the residual stream after block `layer_index` (1-based).
    ///
    /// With `apply_norm`, the global output norm is applied to the tap.
    pub fn extract_layer_features(&self, image: &Tensor<S>, layer_index: usize, apply_norm: bool) -> Result<Tensor<S>> {
        if layer_index == 0 || layer_index > self.config.depth {
            return Err(Error::invalid(
                "extract_layer_features",
                format!("layer {layer_index} outside 1..={}", self.config.depth),
            ));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let opts = ForwardOptions { crop_kind: Some(CropKind::Global), taps: true, ..Default::default() };
        let out = forward_graph(&mut g, self, &vars, std::slice::from_ref(image), &opts)?;
        let tap = out.taps[layer_index - 1];
        if !apply_norm {
            return Ok(g.value(tap).clone());
        }
        let (w, b) = self.layout.norm_global;
        let y = g.layer_norm(tap, vars[w], vars[b], S::c(LN_EPS))?;
        Ok(g.value(y).clone())
    }
}

fn cfg_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    s.into()
}

pub fn config_text(cfg: &ViTConfig) -> String {
    cfg.to_kv("").into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_config_text(text: &str) -> Result<ViTConfig> {
    let mut cfg = ViTConfig::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed line `{line}`")))?;
        if !cfg.set(k.trim(), v.trim())? {
            return Err(Error::Config(format!("unknown key `{}`", k.trim())));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Split an `[H, W, C]` image into `[P, patch * patch * C]` rows, row-major over the grid.
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<(Tensor<S>, (usize, usize))> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Geometry(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!("image {h}x{w} not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Ok((Tensor::new(vec![gh * gw, width], out)?, (gh, gw)))
}

/// Draw a RoPE box scale log-uniformly from `range`.
pub fn sample_jitter(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    if lo == hi {
        return lo;
    }
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Per-block, per-image keep flags for stochastic depth at `rate`.
pub fn sample_drop_path(rng: &mut ChaCha8Rng, depth: usize, n: usize, rate: f64) -> Vec<Vec<bool>> {
    (0..depth).map(|_| (0..n).map(|_| rng.gen::<f64>() >= rate).collect()).collect()
}

/// Attention dispatch on the outlier strategy.
///
/// `q`, `k`, `v` are packed `[n_seq * seq_len, heads * head_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    strategy: OutlierStrategy,
    key_bias: Option<Var>,
    value_bias: Option<Var>,
    n_seq: usize,
    heads: usize,
) -> Result<Var> {
    let rows = g.shape(q)[0];
    if n_seq == 0 || rows % n_seq != 0 {
        return Err(Error::invalid("attention", format!("{rows} rows do not split into {n_seq} sequences")));
    }
    let variant = match strategy {
        OutlierStrategy::Registers | OutlierStrategy::None => AttentionVariant::Standard,
        OutlierStrategy::ValueGating => AttentionVariant::ValueGating,
        OutlierStrategy::AttentionBias => AttentionVariant::AttentionBias,
    };
    let spec = AttentionSpec { n_seq, seq_len: rows / n_seq, heads, variant };
    g.attention(q, k, v, key_bias, value_bias, spec)
}

/// Traced batched forward of same-size images.
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    state: &ViTState<S>,
    vars: &[Var],
    images: &[Tensor<S>],
    opts: &ForwardOptions<'_>,
) -> Result<GraphOutput> {
    let cfg = &state.config;
    let lay = &state.layout;
    let n = images.len();
    if n == 0 {
        return Err(Error::invalid("forward", "empty image batch"));
    }
    if vars.len() != state.params.len() {
        return Err(Error::invalid("forward", format!("{} vars for {} parameters", vars.len(), state.params.len())));
    }
    let d = cfg.embed_dim;
    let shape0 = images[0].shape().to_vec();
    if shape0.len() != 3 || shape0[2] != cfg.in_channels {
        return Err(Error::Geometry(format!("expected [H, W, {}] images, got {shape0:?}", cfg.in_channels)));
    }
    let mut rows = Vec::new();
    let mut grid = (0, 0);
    for img in images {
        if img.shape() != shape0.as_slice() {
            return Err(Error::Geometry(format!("mixed image sizes {:?} and {shape0:?}", img.shape())));
        }
        let (p, gr) = patchify(img, cfg.patch_size)?;
        grid = gr;
        rows.extend_from_slice(p.data());
    }
    let np = grid.0 * grid.1;
    let width = cfg.patch_size * cfg.patch_size * cfg.in_channels;
    let pixels = g.constant(Tensor::new(vec![n * np, width], rows)?);
    let mut x = linear(g, pixels, vars[lay.patch_embed.0], Some(vars[lay.patch_embed.1]))?;

    if let Some(masks) = opts.masks {
        if masks.len() != n || masks.iter().any(|m| m.len() != np) {
            return Err(Error::invalid("forward", format!("mask plan must be {n} x {np}")));
        }
        if masks.iter().flatten().any(|&m| m) {
            let keep: Vec<S> = masks.iter().flatten().map(|&m| if m { S::zero() } else { S::one() }).collect();
            let hit: Vec<S> = keep.iter().map(|&k| S::one() - k).collect();
            let keep = g.constant(Tensor::new(vec![n * np], keep)?);
            let hit = g.constant(Tensor::new(vec![n * np, 1], hit)?);
            let kept = g.mul_col(x, keep)?;
            let filled = g.matmul(hit, vars[lay.mask_token])?;
            x = g.add(kept, filled)?;
        }
    }

    let r = if lay.registers.is_some() { cfg.register_count } else { 0 };
    let prefix = 1 + r;
    let t = prefix + np;
    let cls = g.gather_rows(vars[lay.cls_token], &vec![0; n])?;
    let mut parts = vec![cls];
    if let Some(ri) = lay.registers {
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..r).collect();
        parts.push(g.gather_rows(vars[ri], &idx)?);
    }
    parts.push(x);
    let stacked = g.concat(&parts, 0)?;
    // stacked rows: n cls, then n*r registers, then n*np patches
    let mut order = Vec::with_capacity(n * t);
    for i in 0..n {
        order.push(i);
        order.extend((0..r).map(|j| n + i * r + j));
        order.extend((0..np).map(|j| n + n * r + i * np + j));
    }
    let mut x = g.gather_rows(stacked, &order)?;

    let scale = opts.jitter_scale.unwrap_or(1.0);
    let coords = rope::grid_coords(grid.0, grid.1, scale);
    let (cos, sin) = rope::rope_tables::<S>(&coords, prefix, cfg.head_dim, cfg.rope_base)?;
    let patch_rows: Vec<usize> = (0..n).flat_map(|i| (0..np).map(move |j| i * t + prefix + j)).collect();
    let eps = S::c(LN_EPS);
    let mut taps = Vec::new();
    if let Some(dp) = opts.drop_path {
        if dp.len() != cfg.depth || dp.iter().any(|b| b.len() != n) {
            return Err(Error::invalid("forward", format!("drop-path plan must be {} x {n}", cfg.depth)));
        }
    }
    let keep_scale = S::c(1.0 / (1.0 - cfg.stochastic_depth_rate));

    for (bi, blk) in lay.blocks.iter().enumerate() {
        let drop = match opts.drop_path {
            Some(dp) if cfg.stochastic_depth_rate > 0.0 => {
                let col: Vec<S> = dp[bi]
                    .iter()
                    .flat_map(|&keep| std::iter::repeat(if keep { keep_scale } else { S::zero() }).take(t))
                    .collect();
                Some(g.constant(Tensor::new(vec![n * t], col)?))
            }
            _ => None,
        };
        let h = g.layer_norm(x, vars[blk.ln1.0], vars[blk.ln1.1], eps)?;
        let qkv = linear(g, h, vars[blk.qkv.0], Some(vars[blk.qkv.1]))?;
        let q = g.slice(qkv, 1, 0, d)?;
        let k = g.slice(qkv, 1, d, d)?;
        let v = g.slice(qkv, 1, 2 * d, d)?;
        let q = g.rope(q, &cos, &sin, n, cfg.head_count)?;
        let k = g.rope(k, &cos, &sin, n, cfg.head_count)?;
        let a = attention(
            g,
            q,
            k,
            v,
            cfg.outlier_strategy,
            blk.key_bias.map(|i| vars[i]),
            blk.value_bias.map(|i| vars[i]),
            n,
            cfg.head_count,
        )?;
        let mut o = linear(g, a, vars[blk.proj.0], Some(vars[blk.proj.1]))?;
        if let Some(c) = drop {
            o = g.mul_col(o, c)?;
        }
        x = g.add(x, o)?;

        let h = g.layer_norm(x, vars[blk.ln2.0], vars[blk.ln2.1], eps)?;
        let u = linear(g, h, vars[blk.fc1.0], Some(vars[blk.fc1.1]))?;
        let f = cfg.ffn_hidden_dim;
        let gate = g.slice(u, 1, 0, f)?;
        let up = g.slice(u, 1, f, f)?;
        let s = g.swiglu(gate, up)?;
        let mut o = linear(g, s, vars[blk.fc2.0], Some(vars[blk.fc2.1]))?;
        if let Some(c) = drop {
            o = g.mul_col(o, c)?;
        }
        x = g.add(x, o)?;
        if opts.taps {
            taps.push(g.gather_rows(x, &patch_rows)?);
        }
    }

    let (nw, nb) = match (opts.crop_kind.unwrap_or(CropKind::Global), lay.norm_local) {
        (CropKind::Local, Some(local)) => local,
        _ => lay.norm_global,
    };
    let y = g.layer_norm(x, vars[nw], vars[nb], eps)?;
    let cls = g.gather_rows(y, &(0..n).map(|i| i * t).collect::<Vec<_>>())?;
    let registers = if r > 0 {
        let idx: Vec<usize> = (0..n).flat_map(|i| (1..=r).map(move |j| i * t + j)).collect();
        Some(g.gather_rows(y, &idx)?)
    } else {
        None
    };
    let patches = g.gather_rows(y, &patch_rows)?;
    Ok(GraphOutput { cls, registers, patches, taps, grid, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn tiny(strategy: OutlierStrategy) -> ViTState<f64> {
        let cfg = ViTConfig {
            depth: 2,
            embed_dim: 16,
            ffn_hidden_dim: 24,
            head_count: 2,
            head_dim: 8,
            outlier_strategy: strategy,
            ..ViTConfig::default()
        };
        ViTState::init(cfg, &mut stream_rng(3, Stream::Init, 0)).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        Tensor::from_fn(vec![h, w, 3], |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn token_count_32px() {
        let cfg = ViTConfig::default();
        assert_eq!(cfg.token_count(32, 32), 21);
        let s = tiny(OutlierStrategy::Registers);
        let out = s.forward(&image(32, 32, 1), CropKind::Global, None, None).unwrap();
        assert_eq!(out.patches.shape(), &[16, 16]);
        assert_eq!(out.registers.shape(), &[4, 16]);
        assert_eq!(out.cls.len(), 16);
    }

    #[test]
    fn patchify_orders_pixels_row_major() {
        let img = Tensor::<f64>::from_fn(vec![4, 4, 1], |i| i as f64);
        let (p, grid) = patchify(&img, 2).unwrap();
        assert_eq!(grid, (2, 2));
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(matches!(patchify(&img, 3), Err(Error::Geometry(_))));
    }

    #[test]
    fn separate_norms_change_param_count() {
        let a = ViTState::<f32>::init(ViTConfig::default(), &mut stream_rng(0, Stream::Init, 0)).unwrap();
        let cfg = ViTConfig { separate_output_norms: false, ..ViTConfig::default() };
        let b = ViTState::<f32>::init(cfg, &mut stream_rng(0, Stream::Init, 0)).unwrap();
        assert_eq!(a.param_count(), b.param_count() + 2 * 64);
        assert_ne!(a.layout.norm_local, Some(a.layout.norm_global));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ViTConfig { outlier_strategy: OutlierStrategy::ValueGating, rope_jitter_range: (0.75, 1.5), ..ViTConfig::default() };
        assert_eq!(parse_config_text(&config_text(&cfg)).unwrap(), cfg);
        assert!(parse_config_text("bogus = 1").is_err());
    }

    #[test]
    fn jitter_is_log_uniform_in_range() {
        let mut rng = stream_rng(9, Stream::Jitter, 0);
        let xs: Vec<f64> = (0..4000).map(|_| sample_jitter(&mut rng, (0.5, 2.0))).collect();
        assert!(xs.iter().all(|&s| (0.5..=2.0).contains(&s)));
        let below_one = xs.iter().filter(|&&s| s < 1.0).count() as f64 / xs.len() as f64;
        assert!((below_one - 0.5).abs() < 0.03, "{below_one}");
    }

    #[test]
    fn param_depth_assignment() {
        let s = tiny(OutlierStrategy::Registers);
        let i = s.params.index_of("blocks.1.attn.qkv.weight").unwrap();
        assert_eq!(s.param_depth(i), 2);
        assert_eq!(s.param_depth(s.layout.cls_token), 0);
        assert_eq!(s.param_depth(s.layout.norm_global.0), 3);
    }
}
