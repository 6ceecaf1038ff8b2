use super::FeatureMap;
use crate::error::{Error, Result};

/// Sign patterns (8) times channel permutations (6).
pub const PCA_VARIANTS: usize = 48;

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as rows.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (vals, vecs)
}

/// RGB rendering of the top three principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaImage {
    pub h: usize,
    pub w: usize,
    /// `h * w * 3` values in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub variant: usize,
    /// Fraction of total variance of each of the three components.
    pub explained: [f64; 3],
    /// Components that carry no variance and were rendered as zero channels.
    pub degenerate: [bool; 3],
    /// Unit principal directions (zero when degenerate).
    pub components: [Vec<f64>; 3],
}

/// Project onto the top-3 principal directions and map them to colours.
///
/// `variant = Some(v)` selects sign pattern `v / 6` (bit `c` flips component
/// `c`) and channel permutation `v % 6`. `None` picks the variant whose
/// rendered channels have the smallest sum of pairwise signed correlations,
/// lowest index on ties.
pub fn pca_rgb(f: &FeatureMap, variant: Option<usize>) -> Result<PcaImage> {
    let n = f.len();
    if n < 3 {
        return Err(Error::invalid("pca_rgb", format!("need at least 3 patches, got {n}")));
    }
    if let Some(v) = variant {
        if v >= PCA_VARIANTS {
            return Err(Error::invalid("pca_rgb", format!("variant {v} outside 0..{PCA_VARIANTS}")));
        }
    }
    let d = f.d;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(f.patch(i)) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let x: Vec<f64> = f.patch(i).iter().zip(&mean).map(|(a, b)| a - b).collect();
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += x[a] * x[b] / n as f64;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a * d + b] = cov[b * d + a];
        }
    }
    let (vals, vecs) = jacobi_eigen(&cov, d);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let mut explained = [0.0; 3];
    let mut degenerate = [true; 3];
    let mut components: [Vec<f64>; 3] = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    for c in 0..3.min(d) {
        let lam = vals[c].max(0.0);
        if total > 0.0 && lam > 1e-12 * total {
            explained[c] = lam / total;
            degenerate[c] = false;
            components[c] = vecs[c].clone();
        }
    }
    let mut proj = vec![[0.0f64; 3]; n];
    for (i, p) in proj.iter_mut().enumerate() {
        for c in 0..3 {
            if !degenerate[c] {
                p[c] = f.patch(i).iter().zip(&mean).zip(&components[c]).map(|((x, m), e)| (x - m) * e).sum();
            }
        }
    }
    let render = |v: usize| -> Vec<f64> {
        let signs = v / 6;
        let perm = PERMS[v % 6];
        let mut chans = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (out_c, &src) in perm.iter().enumerate() {
            if degenerate[src] {
                continue;
            }
            let sgn = if signs >> src & 1 == 1 { -1.0 } else { 1.0 };
            let vals: Vec<f64> = proj.iter().map(|p| sgn * p[src]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            chans[out_c] = vals.iter().map(|x| (x - lo) / span).collect();
        }
        (0..n).flat_map(|i| [chans[0][i], chans[1][i], chans[2][i]]).collect()
    };
    let chosen = match variant {
        Some(v) => v,
        None => {
            let mut best = (f64::INFINITY, 0);
            for v in 0..PCA_VARIANTS {
                let s = signed_correlation_sum(&render(v), n);
                if s < best.0 - 1e-9 {
                    best = (s, v);
                }
            }
            best.1
        }
    };
    Ok(PcaImage { h: f.h, w: f.w, rgb: render(chosen), variant: chosen, explained, degenerate, components })
}

fn signed_correlation_sum(rgb: &[f64], n: usize) -> f64 {
    let ch = |c: usize| -> Vec<f64> { (0..n).map(|i| rgb[i * 3 + c]).collect() };
    let (r, g, b) = (ch(0), ch(1), ch(2));
    corr(&r, &g) + corr(&r, &b) + corr(&g, &b)
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma).powi(2);
        bb += (y - mb).powi(2);
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}
