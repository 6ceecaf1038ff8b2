use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Outcome of a frozen-feature probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// Chosen hyper-parameters as `name = value` pairs.
    pub hyperparameters: Vec<(String, f64)>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

fn unit(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 { r.iter().map(|v| v / n).collect() } else { r.clone() }
        })
        .collect()
}

/// Cosine k-nearest-neighbour vote; ties between labels go to the larger
/// summed similarity, then to the smaller label.
pub fn knn_probe(train: &[Vec<f64>], train_labels: &[usize], test: &[Vec<f64>], test_labels: &[usize], k: usize) -> Result<ProbeResult> {
    if train.is_empty() {
        return Err(Error::invalid("knn_probe", "empty training set"));
    }
    if k == 0 || train.len() != train_labels.len() || test.len() != test_labels.len() || test.is_empty() {
        return Err(Error::invalid("knn_probe", "k must be positive and features/labels aligned"));
    }
    let tr = unit(train);
    let te = unit(test);
    let k = k.min(tr.len());
    let n_classes = train_labels.iter().chain(test_labels).max().copied().unwrap_or(0) + 1;
    let correct: usize = te
        .par_iter()
        .zip(test_labels.par_iter())
        .map(|(q, &label)| {
            let mut sims: Vec<(f64, usize)> =
                tr.iter().enumerate().map(|(i, t)| (t.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i)).collect();
            // total order independent of training-set position except for exact ties
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(train_labels[a.1].cmp(&train_labels[b.1])));
            let mut votes = vec![(0usize, 0.0f64); n_classes];
            for &(s, i) in &sims[..k] {
                votes[train_labels[i]].0 += 1;
                votes[train_labels[i]].1 += s;
            }
            let mut best = 0;
            for c in 1..n_classes {
                let (vc, sc) = votes[c];
                let (vb, sb) = votes[best];
                if vc > vb || (vc == vb && sc > sb) {
                    best = c;
                }
            }
            usize::from(best == label)
        })
        .sum();
    Ok(ProbeResult {
        task: "knn".into(),
        metric: "accuracy".into(),
        value: correct as f64 / test.len() as f64,
        hyperparameters: vec![("k".into(), k as f64)],
        train_size: train.len(),
        val_size: 0,
        test_size: test.len(),
    })
}

/// Grid and schedule of the linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeConfig {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            learning_rates: vec![1e-2, 3e-2, 1e-1],
            weight_decays: vec![1e-4, 1e-3],
            epochs: 200,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    d: usize,
    c: usize,
}

impl Linear {
    fn predict(&self, x: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..self.c {
            let s = self.b[k] + (0..self.d).map(|j| x[j] * self.w[j * self.c + k]).sum::<f64>();
            if s > best.0 {
                best = (s, k);
            }
        }
        best.1
    }
}

fn fit(x: &[Vec<f64>], y: &[usize], c: usize, lr: f64, wd: f64, epochs: usize) -> Linear {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut m = Linear { w: vec![0.0; d * c], b: vec![0.0; c], d, c };
    let (mut mw, mut vw) = (vec![0.0; d * c], vec![0.0; d * c]);
    let (mut mb, mut vb) = (vec![0.0; c], vec![0.0; c]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut logits = vec![0.0; c];
    for t in 1..=epochs {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for (xi, &yi) in x.iter().zip(y) {
            for k in 0..c {
                logits[k] = m.b[k] + (0..d).map(|j| xi[j] * m.w[j * c + k]).sum::<f64>();
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for k in 0..c {
                let p = (logits[k] - mx).exp() / z - if k == yi { 1.0 } else { 0.0 };
                gb[k] += p / n;
                for j in 0..d {
                    gw[j * c + k] += p * xi[j] / n;
                }
            }
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for i in 0..d * c {
            mw[i] = b1 * mw[i] + (1.0 - b1) * gw[i];
            vw[i] = b2 * vw[i] + (1.0 - b2) * gw[i] * gw[i];
            m.w[i] = m.w[i] * (1.0 - lr * wd) - lr * (mw[i] / c1) / ((vw[i] / c2).sqrt() + eps);
        }
        for k in 0..c {
            mb[k] = b1 * mb[k] + (1.0 - b1) * gb[k];
            vb[k] = b2 * vb[k] + (1.0 - b2) * gb[k] * gb[k];
            m.b[k] -= lr * (mb[k] / c1) / ((vb[k] / c2).sqrt() + eps);
        }
    }
    m
}

fn accuracy(m: &Linear, x: &[Vec<f64>], y: &[usize]) -> f64 {
    x.iter().zip(y).filter(|(xi, &yi)| m.predict(xi) == yi).count() as f64 / x.len().max(1) as f64
}

/// Softmax regression on standardized features.
///
/// A seeded `val_fraction` of the training rows is held out to pick the
/// grid cell (first best in learning-rate-major order); the reported value
/// is test accuracy of that cell trained on the remaining rows.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    cfg: &LinearProbeConfig,
) -> Result<ProbeResult> {
    if train.len() != train_labels.len() || test.len() != test_labels.len() || train.len() < 2 || test.is_empty() {
        return Err(Error::invalid("linear_probe", "features and labels must be aligned and non-empty"));
    }
    let mut classes: Vec<usize> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("linear_probe", "need at least two classes"));
    }
    if cfg.learning_rates.is_empty() || cfg.weight_decays.is_empty() || cfg.epochs == 0 {
        return Err(Error::Config("linear probe grid and epochs must be non-empty".into()));
    }
    let c = train_labels.iter().chain(test_labels).max().copied().unwrap_or(0) + 1;
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    let norm = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect()).collect()
    };
    let (xtr, xte) = (norm(train), norm(test));
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut stream_rng(cfg.seed, Stream::Probe, 0));
    let n_val = ((cfg.val_fraction * n).round() as usize).clamp(1, train.len() - 1);
    let (val_idx, fit_idx) = idx.split_at(n_val);
    let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) { (ids.iter().map(|&i| xtr[i].clone()).collect(), ids.iter().map(|&i| train_labels[i]).collect()) };
    let (xf, yf) = pick(fit_idx);
    let (xv, yv) = pick(val_idx);
    let mut best: Option<(f64, f64, f64, Linear)> = None;
    for &lr in &cfg.learning_rates {
        for &wd in &cfg.weight_decays {
            let m = fit(&xf, &yf, c, lr, wd, cfg.epochs);
            let acc = accuracy(&m, &xv, &yv);
            if best.as_ref().map_or(true, |b| acc > b.0) {
                best = Some((acc, lr, wd, m));
            }
        }
    }
    let (_, lr, wd, m) = best.expect("non-empty grid");
    Ok(ProbeResult {
        task: "linear".into(),
        metric: "accuracy".into(),
        value: accuracy(&m, &xte, test_labels),
        hyperparameters: vec![("lr".into(), lr), ("wd".into(), wd)],
        train_size: fit_idx.len(),
        val_size: val_idx.len(),
        test_size: test.len(),
    })
}
