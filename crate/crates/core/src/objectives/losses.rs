use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const KOLEO_EPS: f64 = 1e-8;

/// `(student crop, teacher crop)` routing for the image-level loss.
///
/// Student crops of image `i` are laid out as its `n_global` global crops
/// followed by its `n_local` local crops; teacher rows are the global crops.
/// Returned indices are rows of the image-major student and teacher batches.
/// A student global crop is never paired with the teacher view of itself.
pub fn dino_pairs(n_images: usize, n_global: usize, n_local: usize) -> Vec<(usize, usize)> {
    let per = n_global + n_local;
    let mut pairs = Vec::new();
    for i in 0..n_images {
        for s in 0..per {
            for t in 0..n_global {
                if s != t {
                    pairs.push((i * per + s, i * n_global + t));
                }
            }
        }
    }
    pairs
}

/// Mean cross-entropy `-sum t log softmax(s / temp)` over routed pairs.
pub fn dino_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_probs: &Tensor<S>,
    pairs: &[(usize, usize)],
    student_temp: f64,
) -> Result<Var> {
    let (_, k) = teacher_probs.rows_cols();
    let ks = g.shape(student_logits).get(1).copied();
    if ks != Some(k) {
        return Err(Error::shape("dino_loss", g.shape(student_logits), teacher_probs.shape()));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("dino_loss", "no routed pairs"));
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut targets = Vec::with_capacity(pairs.len() * k);
    let nt = teacher_probs.shape()[0];
    for &(_, t) in pairs {
        if t >= nt {
            return Err(Error::invalid("dino_loss", format!("teacher row {t} out of {nt}")));
        }
        targets.extend_from_slice(teacher_probs.row(t));
    }
    let s = g.gather_rows(student_logits, &rows)?;
    let targets = Tensor::new(vec![pairs.len(), k], targets)?;
    g.soft_cross_entropy(s, &targets, S::c(student_temp))
}

/// Masked-patch loss with the number of contributing positions.
#[derive(Debug, Clone, Copy)]
pub struct IbotTerm {
    pub loss: Var,
    pub count: usize,
}

/// Mean cross-entropy at masked patch positions.
///
/// `student_logits` and `teacher_probs` hold one row per entry of
/// `positions`, in the same order; `positions` index the flattened patch
/// grid described by `mask` and must all be masked. No positions gives a
/// zero loss (pass `None` for both inputs).
pub fn ibot_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Option<Var>,
    teacher_probs: Option<&Tensor<S>>,
    mask: &[bool],
    positions: &[usize],
    student_temp: f64,
) -> Result<IbotTerm> {
    let mut seen = vec![false; mask.len()];
    for &p in positions {
        if p >= mask.len() || !mask[p] {
            return Err(Error::invalid("ibot_loss", format!("position {p} is not a masked patch")));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("ibot_loss", format!("position {p} listed twice")));
        }
    }
    if positions.is_empty() {
        return Ok(IbotTerm { loss: g.constant(Tensor::scalar(S::zero())), count: 0 });
    }
    let (Some(s), Some(t)) = (student_logits, teacher_probs) else {
        return Err(Error::invalid("ibot_loss", "masked positions without logits or targets"));
    };
    if g.shape(s)[0] != positions.len() {
        return Err(Error::shape("ibot_loss", g.shape(s), &[positions.len()]));
    }
    let loss = g.soft_cross_entropy(s, t, S::c(student_temp))?;
    Ok(IbotTerm { loss, count: positions.len() })
}

/// Flattened indices of every masked patch, crop-major.
pub fn masked_positions(masks: &[Vec<bool>]) -> (Vec<bool>, Vec<usize>) {
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    let pos = flat.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    (flat, pos)
}

/// Nearest-neighbour entropy regularizer on L2-normalized rows of `features`.
///
/// Rows are split into contiguous groups of `group_size`; a trailing group
/// with a single row is dropped. Each group contributes
/// `-(1/m) sum_i log(d_i + eps)` and groups are averaged.
pub fn koleo_loss<S: Scalar>(g: &mut Graph<S>, features: Var, group_size: usize) -> Result<Var> {
    let (n, _) = g.value(features).rows_cols();
    if n < 2 || group_size < 2 {
        return Err(Error::invalid("koleo_loss", format!("need at least 2 rows and group size, got {n} / {group_size}")));
    }
    let x = g.l2_normalize(features, S::c(1e-12))?;
    let groups: Vec<(usize, usize)> = (0..n)
        .step_by(group_size)
        .map(|s| (s, (s + group_size).min(n)))
        .filter(|(s, e)| e - s >= 2)
        .collect();
    let xv = g.value(x).clone();
    let mut rows = Vec::new();
    let mut nn = Vec::new();
    let mut weights = Vec::new();
    for &(s, e) in &groups {
        let m = e - s;
        for i in s..e {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in s..e {
                if i == j {
                    continue;
                }
                let d2: f64 = xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            rows.push(i);
            nn.push(best.1);
            weights.push(S::c(-1.0 / (m as f64 * groups.len() as f64)));
        }
    }
    let a = g.gather_rows(x, &rows)?;
    let b = g.gather_rows(x, &nn)?;
    let diff = g.sub(a, b)?;
    let d = g.row_norm(diff);
    let d = g.add_scalar(d, S::c(KOLEO_EPS));
    let logd = g.log(d);
    let w = g.constant(Tensor::new(vec![weights.len()], weights)?);
    let weighted = g.mul(logd, w)?;
    Ok(g.sum(weighted))
}

/// `||X_S X_S^T - X_G X_G^T||_F^2` averaged over `n_images` stacked blocks.
///
/// Rows of both inputs are expected to be L2-normalized. `x_g` is a constant.
pub fn gram_loss<S: Scalar>(g: &mut Graph<S>, x_s: Var, x_g: &Tensor<S>, n_images: usize) -> Result<Var> {
    let (rs, ds) = g.value(x_s).rows_cols();
    let (rg, dg) = x_g.rows_cols();
    if rs != rg {
        return Err(Error::Geometry(format!(
            "gram_loss: student has {rs} patch rows, teacher {rg}; downsample the high-resolution teacher features to the student grid first"
        )));
    }
    if ds != dg {
        return Err(Error::shape("gram_loss", g.shape(x_s), x_g.shape()));
    }
    if n_images == 0 || rs % n_images != 0 {
        return Err(Error::invalid("gram_loss", format!("{rs} rows do not split into {n_images} images")));
    }
    let p = rs / n_images;
    let mut terms = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let xs = g.slice(x_s, 0, i * p, p)?;
        let xg_rows = Tensor::new(vec![p, dg], x_g.data()[i * p * dg..(i + 1) * p * dg].to_vec())?;
        let gg = xg_rows.matmul(&xg_rows.transpose()?)?;
        let gs = g.matmul_nt(xs, xs)?;
        let gg = g.constant(gg);
        let diff = g.sub(gs, gg)?;
        let sq = g.sqr(diff);
        terms.push(g.sum(sq));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, S::c(1.0 / n_images as f64)))
}
