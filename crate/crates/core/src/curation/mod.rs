//! Hierarchical k-means over embeddings and balanced sampling of curated parts.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::io::write_atomic;
use crate::tensor::Tensor;

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sse(&self) -> f64 {
        *self.sse_history.last().unwrap_or(&0.0)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start.
///
/// Stops at an assignment fixpoint or after `max_iter` assignment steps.
/// A cluster left empty is re-seeded with the point farthest from its
/// current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, seed: u64) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::invalid("kmeans", format!("need n >= k >= 1, got n = {n}, k = {k}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("kmeans", "points differ in dimension"));
    }
    let mut rng = stream_rng(seed, Stream::Curation, 0);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let near: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let mut next: Vec<usize> = near.iter().map(|x| x.0).collect();
        let mut dists: Vec<f64> = near.iter().map(|x| x.1).collect();
        // re-seed empty clusters one at a time
        loop {
            let mut counts = vec![0usize; k];
            next.iter().for_each(|&a| counts[a] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .expect("n >= k leaves a cluster with two points");
            centroids[empty] = points[far].clone();
            next[far] = empty;
            dists[far] = 0.0;
        }
        sse_history.push(dists.iter().sum());
        let changed = next != assignments;
        assignments = next;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for ((c, s), &m) in centroids.iter_mut().zip(sums).zip(&counts) {
            *c = s.into_iter().map(|v| v / m as f64).collect();
        }
        if !changed {
            break;
        }
    }
    // report the SSE of the final centroids
    let final_sse: f64 = points.iter().zip(&assignments).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    sse_history.push(final_sse);
    Ok(Clustering { centroids, assignments, sse_history, iterations })
}

/// One level of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub centroids: Vec<Vec<f64>>,
    /// Parent cluster of every item of the level below (points for level 0).
    pub assignment: Vec<usize>,
}

/// Clusterings of increasing coarseness; level 0 clusters the points.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHierarchy {
    pub n_points: usize,
    pub levels: Vec<Level>,
}

impl ClusterHierarchy {
    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.centroids.len()).collect()
    }

    /// Cluster of point `i` at `level`.
    pub fn cluster_of(&self, i: usize, level: usize) -> usize {
        let mut c = self.levels[0].assignment[i];
        for l in &self.levels[1..=level] {
            c = l.assignment[c];
        }
        c
    }

    /// Members of every cluster at `level`: points for level 0, level-1 clusters otherwise.
    pub fn children(&self, level: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.levels[level].centroids.len()];
        for (child, &parent) in self.levels[level].assignment.iter().enumerate() {
            out[parent].push(child);
        }
        out
    }
}

/// Cluster the points, then each level's centroids, with strictly
/// decreasing `level_counts`.
pub fn build_hierarchy(points: &[Vec<f64>], level_counts: &[usize], max_iter: usize, seed: u64) -> Result<ClusterHierarchy> {
    if level_counts.is_empty() || level_counts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("level counts {level_counts:?} must be non-empty and strictly decreasing")));
    }
    let mut levels: Vec<Level> = Vec::new();
    for (l, &k) in level_counts.iter().enumerate() {
        let items: &[Vec<f64>] = if l == 0 { points } else { &levels[l - 1].centroids };
        let c = kmeans(items, k, max_iter, seed.wrapping_add(l as u64))?;
        levels.push(Level { centroids: c.centroids, assignment: c.assignments });
    }
    Ok(ClusterHierarchy { n_points: points.len(), levels })
}

/// Occupancy of the sampled set at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationReport {
    pub requested: usize,
    pub sampled: usize,
    /// `occupancy[level][cluster]`.
    pub occupancy: Vec<Vec<usize>>,
    /// Shannon entropy (nats) of each level's occupancy distribution.
    pub entropy: Vec<f64>,
}

impl CurationReport {
    pub fn from_sample(h: &ClusterHierarchy, sampled: &[usize], requested: usize) -> Self {
        let occupancy: Vec<Vec<usize>> = (0..h.levels.len())
            .map(|l| {
                let mut occ = vec![0; h.levels[l].centroids.len()];
                sampled.iter().for_each(|&i| occ[h.cluster_of(i, l)] += 1);
                occ
            })
            .collect();
        let entropy = occupancy.iter().map(|o| occupancy_entropy(o)).collect();
        CurationReport { requested, sampled: sampled.len(), occupancy, entropy }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,cluster,occupancy\n");
        for (l, occ) in self.occupancy.iter().enumerate() {
            for (c, n) in occ.iter().enumerate() {
                let _ = writeln!(s, "{l},{c},{n}");
            }
        }
        s.push_str("level,entropy,sampled\n");
        for (l, e) in self.entropy.iter().enumerate() {
            let _ = writeln!(s, "{l},{e},{}", self.sampled);
        }
        s
    }
}

pub fn occupancy_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Split `m` as evenly as possible over children with the given capacities;
/// quota a child cannot absorb moves to its siblings. Leftover units after
/// the even share go to a seeded random subset.
fn split_quota(m: usize, caps: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut quota = vec![0usize; caps.len()];
    let mut remaining = m;
    loop {
        let open: Vec<usize> = (0..caps.len()).filter(|&i| quota[i] < caps[i]).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        if share == 0 {
            let mut order = open;
            order.shuffle(rng);
            for &i in order.iter().take(remaining) {
                quota[i] += 1;
            }
            break;
        }
        for &i in &open {
            let add = share.min(caps[i] - quota[i]);
            quota[i] += add;
            remaining -= add;
        }
    }
    quota
}

/// Top-down even-quota sampling of `m` distinct points.
pub fn balanced_sample(h: &ClusterHierarchy, m: usize, seed: u64) -> Result<(Vec<usize>, CurationReport)> {
    if m > h.n_points {
        return Err(Error::invalid("balanced_sample", format!("requested {m} of {} points", h.n_points)));
    }
    let mut rng = stream_rng(seed, Stream::Curation, 1);
    let top = h.levels.len() - 1;
    let children: Vec<Vec<Vec<usize>>> = (0..h.levels.len()).map(|l| h.children(l)).collect();
    // points under every cluster of every level
    let mut size: Vec<Vec<usize>> = vec![children[0].iter().map(Vec::len).collect()];
    for l in 1..h.levels.len() {
        let s = children[l].iter().map(|kids| kids.iter().map(|&c| size[l - 1][c]).sum()).collect();
        size.push(s);
    }
    let mut picked = Vec::with_capacity(m);
    // (level, cluster, quota)
    let roots: Vec<usize> = (0..h.levels[top].centroids.len()).collect();
    let q = split_quota(m, &size[top], &mut rng);
    let mut stack: Vec<(usize, usize, usize)> = roots.into_iter().zip(q).rev().map(|(c, q)| (top, c, q)).collect();
    while let Some((l, c, q)) = stack.pop() {
        if q == 0 {
            continue;
        }
        let kids = &children[l][c];
        if l == 0 {
            for i in sample(&mut rng, kids.len(), q) {
                picked.push(kids[i]);
            }
            continue;
        }
        let caps: Vec<usize> = kids.iter().map(|&k| size[l - 1][k]).collect();
        let qs = split_quota(q, &caps, &mut rng);
        for (&k, q) in kids.iter().zip(qs).rev() {
            stack.push((l - 1, k, q));
        }
    }
    picked.sort_unstable();
    let report = CurationReport::from_sample(h, &picked, m);
    Ok((picked, report))
}

/// Average-pooled pixels as a curation embedding: `side x side x C` values.
pub fn pixel_embedding(image: &Tensor<f32>, side: usize) -> Result<Vec<f64>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Geometry(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::Geometry(format!("{h}x{w} image not divisible into {side}x{side} cells")));
    }
    let (bh, bw) = (h / side, w / side);
    let data = image.data();
    let mut out = vec![0.0; side * side * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[((y / bh) * side + x / bw) * c + ch] += data[(y * w + x) * c + ch] as f64 / (bh * bw) as f64;
            }
        }
    }
    Ok(out)
}

/// One sample id per line.
pub fn write_index(path: &Path, ids: &[usize]) -> Result<()> {
    let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
    write_atomic(path, text.as_bytes())
}

pub fn read_index(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| Error::Format(format!("bad index line `{l}`"))))
        .collect()
}
