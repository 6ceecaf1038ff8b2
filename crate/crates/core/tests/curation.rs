use gramssl_core::curation::{balanced_sample, build_hierarchy, kmeans, occupancy_entropy, read_index, write_index, CurationReport};
use gramssl_core::rng::{stream_rng, Stream};
use proptest::prelude::*;
use rand::Rng;

/// Minimum SSE over every labelling of `xs` into `k` non-empty groups.
fn exhaustive_sse(xs: &[f64], k: usize) -> f64 {
    let n = xs.len();
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        let mut labels = vec![0; n];
        for i in 0..n {
            labels[i] = c % k;
            c /= k;
            sums[labels[i]] += xs[i];
            counts[labels[i]] += 1;
        }
        if counts.contains(&0) {
            continue;
        }
        let sse: f64 = (0..n).map(|i| (xs[i] - sums[labels[i]] / counts[labels[i]] as f64).powi(2)).sum();
        best = best.min(sse);
    }
    best
}

fn one_d(xs: &[f64]) -> Vec<Vec<f64>> {
    xs.iter().map(|&x| vec![x]).collect()
}

#[test]
fn kmeans_hand_case() {
    let c = kmeans(&one_d(&[0.0, 0.0, 0.0, 10.0]), 2, 50, 3).unwrap();
    let a = &c.assignments;
    assert_eq!(a[0], a[1]);
    assert_eq!(a[1], a[2]);
    assert_ne!(a[0], a[3]);
    assert_eq!(c.centroids[a[0]], vec![0.0]);
    assert_eq!(c.centroids[a[3]], vec![10.0]);
    assert_eq!(c.sse(), exhaustive_sse(&[0.0, 0.0, 0.0, 10.0], 2));
}

#[test]
fn kmeans_matches_exhaustive_on_separated_1d_groups() {
    for seed in 0..40u64 {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        let k = rng.gen_range(2..=3);
        let mut xs = Vec::new();
        for g in 0..k {
            for _ in 0..rng.gen_range(1..=3) {
                xs.push(g as f64 * 100.0 + rng.gen_range(0.0..5.0));
            }
        }
        let c = kmeans(&one_d(&xs), k, 100, seed).unwrap();
        let oracle = exhaustive_sse(&xs, k);
        assert!((c.sse() - oracle).abs() <= 1e-9 * oracle.max(1.0), "seed {seed}: {} vs {oracle}", c.sse());
    }
}

#[test]
fn kmeans_is_deterministic() {
    let mut rng = stream_rng(1, Stream::Data, 0);
    let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    assert_eq!(kmeans(&pts, 7, 50, 9).unwrap(), kmeans(&pts, 7, 50, 9).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn lloyd_sse_never_increases(seed in 0u64..10_000, k in 1usize..6) {
        let mut rng = stream_rng(seed, Stream::Data, 1);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let c = kmeans(&pts, k, 30, seed).unwrap();
        prop_assert!(c.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", c.sse_history);
        let mut used = vec![false; k];
        c.assignments.iter().for_each(|&a| used[a] = true);
        prop_assert!(used.iter().all(|&u| u));
    }

    #[test]
    fn hierarchy_is_parent_consistent(seed in 0u64..10_000) {
        let mut rng = stream_rng(seed, Stream::Data, 2);
        let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let h = build_hierarchy(&pts, &[12, 5, 2], 30, seed).unwrap();
        prop_assert_eq!(h.counts(), vec![12, 5, 2]);
        for i in 0..60 {
            let l0 = h.levels[0].assignment[i];
            let l1 = h.levels[1].assignment[l0];
            prop_assert_eq!(h.cluster_of(i, 1), l1);
            prop_assert_eq!(h.cluster_of(i, 2), h.levels[2].assignment[l1]);
        }
    }

    #[test]
    fn balanced_sample_is_exact_and_distinct(seed in 0u64..10_000, m in 0usize..=60) {
        let mut rng = stream_rng(seed, Stream::Data, 3);
        let pts: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let h = build_hierarchy(&pts, &[8, 3], 30, seed).unwrap();
        let (ids, report) = balanced_sample(&h, m, seed).unwrap();
        prop_assert_eq!(ids.len(), m);
        prop_assert_eq!(report.sampled, m);
        let mut s = ids.clone();
        s.dedup();
        prop_assert_eq!(s.len(), m);
        prop_assert!(ids.iter().all(|&i| i < 60));
    }
}

#[test]
fn singleton_hierarchy_is_identity() {
    let pts = one_d(&[0.0, 1.0, 2.0, 5.0, 9.0]);
    let h = build_hierarchy(&pts, &[5], 10, 0).unwrap();
    let mut seen = h.levels[0].assignment.clone();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    for i in 0..5 {
        assert_eq!(h.levels[0].centroids[h.levels[0].assignment[i]], pts[i]);
    }
    let (ids, _) = balanced_sample(&h, 3, 4).unwrap();
    assert_eq!(ids.len(), 3);
    assert!(build_hierarchy(&pts, &[2, 3], 10, 0).is_err());
}

fn blobs(centres: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::Data, 4);
    centres
        .iter()
        .flat_map(|&(x, y)| (0..per).map(|_| vec![x + rng.gen_range(-spread..spread), y + rng.gen_range(-spread..spread)]).collect::<Vec<_>>())
        .collect()
}

#[test]
fn top_level_separates_blobs_of_sub_blobs() {
    let centres = [(0.0, 0.0), (3.0, 0.0), (0.0, 3.0), (100.0, 100.0), (103.0, 100.0), (100.0, 103.0)];
    let pts = blobs(&centres, 5, 0.2, 1);
    let h = build_hierarchy(&pts, &[6, 2], 50, 2).unwrap();
    let top: Vec<usize> = (0..pts.len()).map(|i| h.cluster_of(i, 1)).collect();
    assert!(top[..15].iter().all(|&t| t == top[0]));
    assert!(top[15..].iter().all(|&t| t == top[15]));
    assert_ne!(top[0], top[15]);
}

#[test]
fn skewed_blobs_get_even_quota() {
    let mut pts = blobs(&[(0.0, 0.0)], 90, 1.0, 5);
    pts.extend(blobs(&[(50.0, 50.0)], 10, 1.0, 6));
    let h = build_hierarchy(&pts, &[8, 2], 50, 0).unwrap();
    let big = h.cluster_of(0, 1);
    for m in [10, 20] {
        let (_, r) = balanced_sample(&h, m, 1).unwrap();
        assert_eq!(r.occupancy[1][big], m / 2);
    }
    // small blob caps at 10
    let (_, r) = balanced_sample(&h, 30, 1).unwrap();
    assert_eq!(r.occupancy[1][big], 20);
    assert!(balanced_sample(&h, 101, 1).is_err());
}

#[test]
fn report_and_index_files() {
    let pts = blobs(&[(0.0, 0.0), (9.0, 9.0)], 10, 1.0, 7);
    let h = build_hierarchy(&pts, &[4, 2], 50, 0).unwrap();
    let (ids, r) = balanced_sample(&h, 8, 0).unwrap();
    assert_eq!(r, CurationReport::from_sample(&h, &ids, 8));
    assert!((r.entropy[1] - occupancy_entropy(&r.occupancy[1])).abs() < 1e-15);
    assert!(r.to_csv().starts_with("level,cluster,occupancy\n"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("part.idx");
    write_index(&p, &ids).unwrap();
    assert_eq!(read_index(&p).unwrap(), ids);
}
