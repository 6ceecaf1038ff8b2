//! Axial rotary position embedding on a normalized coordinate box.
//!
//! Patch centres are placed in `[-1, 1] x [-1, 1]`, optionally scaled to
//! `[-s, s]` (box jittering). Each head splits its channels in half: the
//! first half rotates with the row coordinate, the second with the column
//! coordinate. Pair `f` of an axis rotates by `2 pi * coord / base^(f / (head_dim / 4))`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Centres of a `gh x gw` patch grid in the normalized box, scaled by `scale`.
pub fn grid_coords(gh: usize, gw: usize, scale: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let y = ((i as f64 + 0.5) / gh as f64 * 2.0 - 1.0) * scale;
            let x = ((j as f64 + 0.5) / gw as f64 * 2.0 - 1.0) * scale;
            out.push((y, x));
        }
    }
    out
}

/// Per-token `(cos, sin)` tables, each `[coords.len() + prefix, head_dim / 2]`.
///
/// The first `prefix` rows (CLS and registers) are identity rotations.
pub fn rope_tables<S: Scalar>(
    coords: &[(f64, f64)],
    prefix: usize,
    head_dim: usize,
    base: f64,
) -> Result<(Vec<S>, Vec<S>)> {
    if head_dim % 4 != 0 || head_dim == 0 {
        return Err(Error::Config(format!("head_dim {head_dim} not divisible by 4")));
    }
    let quarter = head_dim / 4;
    let half = head_dim / 2;
    let periods: Vec<f64> = (0..quarter).map(|f| base.powf(f as f64 / quarter as f64)).collect();
    let rows = prefix + coords.len();
    let mut cos = vec![S::one(); rows * half];
    let mut sin = vec![S::zero(); rows * half];
    for (t, &(y, x)) in coords.iter().enumerate() {
        let row = (prefix + t) * half;
        for (f, period) in periods.iter().enumerate() {
            let ay = 2.0 * std::f64::consts::PI * y / period;
            let ax = 2.0 * std::f64::consts::PI * x / period;
            cos[row + f] = S::c(ay.cos());
            sin[row + f] = S::c(ay.sin());
            cos[row + quarter + f] = S::c(ax.cos());
            sin[row + quarter + f] = S::c(ax.sin());
        }
    }
    Ok((cos, sin))
}

/// Rotate queries or keys `[n_seq * (prefix + coords.len()), heads * head_dim]`.
pub fn apply_rope<S: Scalar>(
    g: &mut Graph<S>,
    q_or_k: Var,
    coords: &[(f64, f64)],
    prefix: usize,
    n_seq: usize,
    heads: usize,
    base: f64,
) -> Result<Var> {
    let d = g.shape(q_or_k).get(1).copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("cannot split width {d} into {heads} heads")));
    }
    let (cos, sin) = rope_tables::<S>(coords, prefix, d / heads, base)?;
    g.rope(q_or_k, &cos, &sin, n_seq, heads)
}
