//! Acceptance gate: one line per criterion, non-zero exit if any criterion that ran failed.
//!
//! Criteria 4 and 5 train three toy ViTs for 20k steps each (about 3.5 h
//! on one core) and only run with `GRAMSSL_ACCEPTANCE_FULL=1`.

mod common;

use std::time::Instant;

use gramssl_core::curation::{balanced_sample, build_hierarchy, kmeans, occupancy_entropy};
use gramssl_core::distill::{per_worker_cost, plan_assignment, plan_with, simulate_iteration, CostModel};
use gramssl_core::nn::ParamSet;
use gramssl_core::objectives::{gram_loss, sinkhorn_trace, HeadConfig, LossWeights};
use gramssl_core::rng::{stream_rng, Stream};
use gramssl_core::runner::{self, load_config, run_checkpoint, Lineage};
use gramssl_core::tensor::{AttentionSpec, AttentionVariant};
use gramssl_core::train::{
    adaptation_triples, build_batch, ema_update, evaluate, load_checkpoint, next_batch, sample_triple, schedule, student_objective,
    teacher_targets, CropBatch, CropConfig, EvalReport, EvalSet, MaskConfig, MixSamplerConfig, Model, ModelVars, ObjectiveConfig,
    ScheduleConfig, ShapesDataset, StudentNoise, TrainConfig, TrainPhase, Trainer,
};
use gramssl_core::vit::{ViTConfig, ViTState};
use gramssl_core::{Graph, Tensor, Var};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

const FULL_ENV: &str = "GRAMSSL_ACCEPTANCE_FULL";

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ------------------------------------------------------------ criterion 1

fn m(shape: &[usize], seed: u64) -> Tensor<f64> {
    common::uniform(shape, -2.0, 2.0, seed)
}

fn op_checks() -> Vec<(&'static str, f64)> {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;
    let p = |f: fn(&mut Graph<f64>, &[Var]) -> Var| -> Build { Box::new(f) };
    let mut targets = common::uniform(&[3, 5], 0.1, 1.0, 9);
    for row in targets.data_mut().chunks_mut(5) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|t| *t /= s);
    }
    let angles: Vec<f64> = (0..6).map(|i| 0.37 * i as f64 - 0.5).collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) = angles.iter().map(|a| (a.cos(), a.sin())).unzip();
    let attn = |variant| -> Build {
        Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let spec = AttentionSpec { n_seq: 2, seq_len: 3, heads: 2, variant };
            let y = g.attention(v[0], v[1], v[2], Some(v[3]), Some(v[4]), spec).unwrap();
            common::probe(g, y, 7)
        })
    };
    let qkv = || vec![m(&[6, 4], 1), m(&[6, 4], 2), m(&[6, 4], 3), m(&[4], 4), m(&[4], 5)];
    let pos = common::uniform(&[2, 5], 0.5, 2.0, 4);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("add", vec![m(&[3, 4], 1), m(&[3, 4], 2)], p(|g, v| { let y = g.add(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("sub", vec![m(&[3, 4], 1), m(&[3, 4], 2)], p(|g, v| { let y = g.sub(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("mul", vec![m(&[3, 4], 1), m(&[3, 4], 2)], p(|g, v| { let y = g.mul(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("div", vec![m(&[2, 5], 1), pos.clone()], p(|g, v| { let y = g.div(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("add_row", vec![m(&[4, 3], 1), m(&[3], 2)], p(|g, v| { let y = g.add_row(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("mul_row", vec![m(&[4, 3], 1), m(&[3], 2)], p(|g, v| { let y = g.mul_row(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("mul_col", vec![m(&[4, 3], 1), m(&[4], 2)], p(|g, v| { let y = g.mul_col(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("scale", vec![m(&[2, 5], 1)], p(|g, v| { let y = g.scale(v[0], -1.7); common::probe(g, y, 1) })),
        ("exp", vec![m(&[2, 5], 1)], p(|g, v| { let y = g.exp(v[0]); common::probe(g, y, 1) })),
        ("log", vec![pos], p(|g, v| { let y = g.log(v[0]); common::probe(g, y, 1) })),
        ("sqr", vec![m(&[2, 5], 1)], p(|g, v| { let y = g.sqr(v[0]); common::probe(g, y, 1) })),
        ("silu", vec![m(&[2, 5], 1)], p(|g, v| { let y = g.silu(v[0]); common::probe(g, y, 1) })),
        ("gelu", vec![m(&[2, 5], 1)], p(|g, v| { let y = g.gelu(v[0]); common::probe(g, y, 1) })),
        ("swiglu", vec![m(&[2, 5], 1), m(&[2, 5], 2)], p(|g, v| { let y = g.swiglu(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("matmul", vec![m(&[3, 4], 1), m(&[4, 2], 2)], p(|g, v| { let y = g.matmul(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("matmul_nt", vec![m(&[3, 4], 1), m(&[5, 4], 2)], p(|g, v| { let y = g.matmul_nt(v[0], v[1]).unwrap(); common::probe(g, y, 1) })),
        ("transpose", vec![m(&[3, 4], 1)], p(|g, v| { let y = g.transpose(v[0]).unwrap(); common::probe(g, y, 1) })),
        ("reshape", vec![m(&[3, 4], 1)], p(|g, v| { let y = g.reshape(v[0], &[2, 6]).unwrap(); common::probe(g, y, 1) })),
        ("concat", vec![m(&[2, 3], 1), m(&[2, 5], 2)], p(|g, v| { let y = g.concat(&[v[0], v[1]], 1).unwrap(); common::probe(g, y, 1) })),
        ("slice", vec![m(&[5, 3], 1)], p(|g, v| { let y = g.slice(v[0], 0, 1, 3).unwrap(); common::probe(g, y, 1) })),
        ("gather_rows", vec![m(&[4, 3], 1)], p(|g, v| { let y = g.gather_rows(v[0], &[3, 0, 3]).unwrap(); common::probe(g, y, 1) })),
        ("mean", vec![m(&[3, 4], 1)], p(|g, v| { let y = g.sqr(v[0]); g.mean(y) })),
        ("sum_last", vec![m(&[3, 4], 1)], p(|g, v| { let y = g.sum_last(v[0]); common::probe(g, y, 1) })),
        ("mean_last", vec![m(&[3, 4], 1)], p(|g, v| { let y = g.mean_last(v[0]); common::probe(g, y, 1) })),
        ("row_norm", vec![m(&[3, 4], 1)], p(|g, v| { let y = g.row_norm(v[0]); common::probe(g, y, 1) })),
        ("softmax", vec![m(&[3, 5], 1)], p(|g, v| { let y = g.softmax(v[0], 0.7).unwrap(); common::probe(g, y, 1) })),
        ("log_softmax", vec![m(&[3, 5], 1)], p(|g, v| { let y = g.log_softmax(v[0], 0.4).unwrap(); common::probe(g, y, 1) })),
        ("layer_norm", vec![m(&[3, 5], 1), m(&[5], 2), m(&[5], 3)], p(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(); common::probe(g, y, 1) })),
        ("l2_normalize", vec![m(&[3, 5], 1)], p(|g, v| { let y = g.l2_normalize(v[0], 1e-6).unwrap(); common::probe(g, y, 1) })),
        ("soft_cross_entropy", vec![m(&[3, 5], 1)], Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.soft_cross_entropy(v[0], &targets, 0.1).unwrap())),
        ("rope", vec![m(&[6, 8], 1)], Box::new(move |g: &mut Graph<f64>, v: &[Var]| { let y = g.rope(v[0], &cos, &sin, 2, 2).unwrap(); common::probe(g, y, 1) })),
        ("attention", qkv(), attn(AttentionVariant::Standard)),
        ("attention_value_gating", qkv(), attn(AttentionVariant::ValueGating)),
        ("attention_bias", qkv(), attn(AttentionVariant::AttentionBias)),
    ];
    cases.into_iter().map(|(name, inputs, build)| (name, common::gradcheck(&inputs, |g, v| build(g, v)))).collect()
}

fn tiny_model(seed: u64) -> Model<f64> {
    let vit = ViTConfig { depth: 1, embed_dim: 8, ffn_hidden_dim: 8, head_count: 2, head_dim: 4, register_count: 1, ..ViTConfig::default() };
    let head = HeadConfig { hidden_dim: 8, bottleneck_dim: 4, prototype_count: 6 };
    let mut m = Model::init(vit, head, head, &mut stream_rng(seed, Stream::Init, 0)).unwrap();
    // push the bottleneck away from zero so finite differences of its L2 norm stay well conditioned
    for h in [&mut m.dino_head, &mut m.ibot_head] {
        for i in [0, 2, 4] {
            h.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v *= 25.0);
        }
    }
    m
}

fn toy_batch(gram_size: Option<usize>) -> CropBatch {
    let data = ShapesDataset::generate(2, 32, 3).unwrap();
    let imgs: Vec<&Tensor<f32>> = data.images.iter().collect();
    let crops = CropConfig { global_size: 16, local_size: 8, n_local: 2, ..CropConfig::default() };
    let masks = MaskConfig { prob: 1.0, ratio: (0.25, 0.5) };
    let noise = StudentNoise { jitter_range: Some((0.5, 2.0)), depth: 1, drop_rate: 0.0 };
    build_batch(&imgs, vec![0, 1], &crops, &masks, 8, gram_size, noise, 3, 0).unwrap()
}

fn composite_error() -> f64 {
    let student = tiny_model(1);
    let teacher = tiny_model(2);
    let batch = toy_batch(None);
    let targets = teacher_targets(&teacher, &batch, 0.05, 3).unwrap();
    let cfg = ObjectiveConfig { weights: LossWeights::pretrain(), koleo_group: 2, ..ObjectiveConfig::default() };
    let inputs: Vec<Tensor<f64>> = student.parts().iter().flat_map(|p| p.tensors().to_vec()).collect();
    let [a, b, _] = student.parts().map(|p| p.len());
    common::gradcheck_step(&inputs, 1e-6, |g, vars| {
        let mv = ModelVars { backbone: vars[..a].to_vec(), dino_head: vars[a..a + b].to_vec(), ibot_head: vars[a + b..].to_vec() };
        student_objective(g, &student, &mv, &batch, &targets, &cfg).unwrap().total
    })
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let ops = op_checks();
    let (worst_op, worst) = ops.iter().fold(("-", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let composite = composite_error();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && composite < 1e-3 && secs < 120.0,
        format!("{} ops, worst relative error {worst:.2e} ({worst_op}; diffs under 1e-7 absolute count as exact) (< 1e-4); composite pre-training loss {composite:.2e} (< 1e-3); {secs:.1}s (< 120s)", ops.len()),
    )
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Outcome {
    let mut worst_row = 0.0f64;
    let mut monotone = true;
    for seed in 0..100u64 {
        let s = common::uniform(&[8, 4], -2.0, 2.0, 500 + seed);
        let (q, trace) = sinkhorn_trace(&s, 10, 0.5).unwrap();
        for row in q.data().chunks(4) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        monotone &= trace.windows(2).all(|w| w[1] <= w[0]);
    }
    verdict(worst_row < 1e-6 && monotone, format!("100 instances 8x4: max |row sum - 1| {worst_row:.1e} (< 1e-6); column deviation monotone: {monotone}"))
}

// ------------------------------------------------------------ criterion 3

fn gram_value(xs: &Tensor<f64>, xg: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(xs.clone());
    let l = gram_loss(&mut g, x, xg, 1).unwrap();
    g.value(l).item()
}

fn unit_rows(mut t: Tensor<f64>) -> Tensor<f64> {
    let (_, c) = t.rows_cols();
    for row in t.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn criterion_3() -> Outcome {
    let mut self_zero = true;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let xs = unit_rows(common::uniform(&[6, 4], -1.0, 1.0, 900 + seed));
        let xg = unit_rows(common::uniform(&[6, 4], -1.0, 1.0, 1900 + seed));
        self_zero &= gram_value(&xs, &xs) == 0.0;
        let a = common::uniform(&[4, 4], -1.0, 1.0, 2900 + seed);
        let q = DMatrix::from_row_slice(4, 4, a.data()).qr().q();
        let r = Tensor::from_fn(vec![4, 4], |i| q[(i / 4, i % 4)]);
        worst = worst.max((gram_value(&xs.matmul(&r).unwrap(), &xg) - gram_value(&xs, &xg)).abs());
    }
    let hand = gram_value(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), &Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
    verdict(
        self_zero && worst < 1e-6 && hand == 2.0,
        format!("L(X,X)=0 on 100 draws: {self_zero}; rotation deviation {worst:.1e} (< 1e-6); 2x2 hand case {hand} (== 2)"),
    )
}

// ------------------------------------------------------- criteria 4 and 5

const PRE_STEPS: u64 = 20_000;
const SOURCE_STEP: u64 = 4_000;
const REFINE_STEPS: u64 = 2_000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct SeedRun {
    at_source: EvalReport,
    at_end: EvalReport,
    /// Refinement outcome with high-res factor 2 and 1.
    refined: [EvalReport; 2],
}

fn pretrain_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_phase(TrainPhase::Pretrain, 100);
    cfg.seed = seed;
    cfg.steps = PRE_STEPS;
    cfg.gram.source_checkpoint_step = SOURCE_STEP;
    cfg
}

fn refine(seed: u64, dir: &std::path::Path, gram_source: &ViTState<f32>, factor: usize, set: &EvalSet) -> EvalReport {
    let mut cfg = TrainConfig::for_phase(TrainPhase::Refine, 100);
    cfg.seed = seed;
    cfg.steps = REFINE_STEPS;
    cfg.gram.source_checkpoint_step = SOURCE_STEP;
    cfg.gram.highres_factor = factor;
    cfg.objective.weights.gram = 2.0;
    let source = load_checkpoint(&dir.join("end.ckpt")).unwrap();
    let mut t = Trainer::continue_from(cfg.clone(), TrainPhase::Refine, source, Some(gram_source.clone())).unwrap();
    while t.remaining() > 0 {
        t.step().unwrap();
    }
    evaluate(&t.state.teacher.backbone, set, &cfg.eval, t.step).unwrap()
}

fn run_seed(seed: u64) -> SeedRun {
    let t0 = Instant::now();
    let cfg = pretrain_config(seed);
    let set = EvalSet::new(&cfg).unwrap();
    let mut t = Trainer::pretrain(cfg.clone()).unwrap();
    let mut source = None;
    let mut at_source = None;
    while t.remaining() > 0 {
        t.step().unwrap();
        if t.step % SOURCE_STEP == 0 {
            let r = evaluate(&t.state.teacher.backbone, &set, &cfg.eval, t.step).unwrap();
            eprintln!("  seed {seed} step {}: locality {:.4} cls-patch {:.4} knn {:.3} ({:.0}s)", t.step, r.locality, r.cls_patch_cosine, r.knn, t0.elapsed().as_secs_f64());
            if t.step == SOURCE_STEP {
                source = Some(t.state.teacher.backbone.clone());
                at_source = Some(r);
            }
        }
    }
    let at_end = evaluate(&t.state.teacher.backbone, &set, &cfg.eval, t.step).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.save(&dir.path().join("end.ckpt")).unwrap();
    let source = source.unwrap();
    let refined = [2, 1].map(|f| {
        let r = refine(seed, dir.path(), &source, f, &set);
        eprintln!("  seed {seed} refined x{f}: locality {:.4} cls-patch {:.4} knn {:.3} ({:.0}s)", r.locality, r.cls_patch_cosine, r.knn, t0.elapsed().as_secs_f64());
        r
    });
    SeedRun { at_source: at_source.unwrap(), at_end, refined }
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criteria_4_5() -> (Outcome, Outcome) {
    if std::env::var(FULL_ENV).map_or(true, |v| v != "1") {
        let why = format!("NOT RUN: needs {FULL_ENV}=1 (3 seeds x {PRE_STEPS} steps, about 3.5 h on one core)");
        return (Outcome::NotRun(why.clone()), Outcome::NotRun(why));
    }
    let t0 = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let count = |f: &dyn Fn(&SeedRun) -> bool| runs.iter().filter(|r| f(r)).count();
    let cos_up = count(&|r| r.at_end.cls_patch_cosine > r.at_source.cls_patch_cosine);
    let loc_drop = count(&|r| r.at_end.locality <= 0.9 * r.at_source.locality);
    let recovered = count(&|r| r.refined[0].locality >= 0.95 * r.at_source.locality);
    let knn_kept = count(&|r| r.refined[0].knn >= r.at_end.knn - 0.01);
    let rows: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| {
            format!(
                "seed {s}: loc {:.4}->{:.4}->{:.4} cos {:.4}->{:.4} knn {:.3}->{:.3}",
                r.at_source.locality, r.at_end.locality, r.refined[0].locality, r.at_source.cls_patch_cosine, r.at_end.cls_patch_cosine, r.at_end.knn, r.refined[0].knn
            )
        })
        .collect();
    let c4 = verdict(
        cos_up >= 2 && loc_drop >= 2 && recovered >= 2 && knn_kept >= 2 && mins <= 120.0,
        format!(
            "seeds passing: cls-patch up {cos_up}/3, locality -10% {loc_drop}/3, recovery >=95% {recovered}/3, kNN drop <=1pt {knn_kept}/3 (each >= 2); {mins:.0} min (<= 120) [{}]",
            rows.join("; ")
        ),
    );
    let hi = median3(runs.iter().map(|r| r.refined[0].locality).collect());
    let lo = median3(runs.iter().map(|r| r.refined[1].locality).collect());
    let c5 = verdict(hi >= lo, format!("median refined locality x2 {hi:.4} >= x1 {lo:.4}"));
    (c4, c5)
}

// ------------------------------------------------------------ criterion 6

fn compositions(n: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![n]];
    }
    (1..=n - (parts - 1))
        .flat_map(|first| {
            compositions(n - first, parts - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut rng = stream_rng(6, Stream::Sampler, 0);
    let (mut checked, mut exact) = (0, 0);
    for s in 1..=4usize {
        for n in s..=12usize {
            for trial in 0..5 {
                let costs: Vec<f64> = (0..s).map(|_| if trial % 2 == 0 { rng.gen_range(1..4) as f64 } else { rng.gen_range(0.1..5.0) }).collect();
                let model = CostModel::new(rng.gen_range(0.5..3.0), costs, 64.0, n);
                let brute = compositions(n, s)
                    .iter()
                    .map(|a| a.iter().enumerate().map(|(i, &w)| model.group_time(i, w)).fold(f64::NEG_INFINITY, f64::max))
                    .fold(f64::INFINITY, f64::min);
                checked += 1;
                exact += usize::from(plan_assignment(&model).unwrap().makespan == brute);
            }
        }
    }
    let reference = plan_assignment(&CostModel::new(1.0, vec![1.0, 2.0], 32.0, 6)).unwrap().workers;
    let one = CostModel::new(6.0, vec![2.0], 64.0, 4);
    let two = CostModel::new(6.0, vec![2.0, 3.0], 64.0, 10);
    let (p1, p2) = (plan_with(&one, &[4]).unwrap(), plan_with(&two, &[4, 6]).unwrap());
    let share_1 = simulate_iteration(&p1, &one).events[0].end;
    let share_2 = simulate_iteration(&p2, &two).events[0].end;
    let added = per_worker_cost(&p2, &two).total_work() - per_worker_cost(&p1, &one).total_work();
    let added_err = (added - 64.0 * 3.0).abs();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        exact == checked && reference == vec![2, 4] && share_2 < share_1 && added_err <= 1e-9 && secs < 60.0,
        format!(
            "exhaustive match {exact}/{checked}; (1,2),N=6 -> {reference:?}; teacher share {share_1} -> {share_2}; added work error {added_err:.1e} (<= 1e-9); {secs:.1}s"
        ),
    )
}

// ------------------------------------------------------------ criterion 7

fn criterion_7() -> Outcome {
    let cfg = MixSamplerConfig { p_homogeneous: 0.1, weights: vec![0.6, 0.4] };
    let parts: Vec<Vec<usize>> = (0..3).map(|p| (p * 10..p * 10 + 10).collect()).collect();
    let draws = 20_000;
    let homo = (0..draws).filter(|&i| next_batch(&cfg, &parts, 4, &mut stream_rng(7, Stream::Sampler, i)).unwrap().homogeneous).count();
    let rate = homo as f64 / draws as f64;
    let table = adaptation_triples();
    let mut counts = vec![0usize; table.len()];
    for i in 0..10_000u64 {
        let t = sample_triple(&table, &mut stream_rng(8, Stream::Sampler, i));
        counts[table.iter().position(|x| *x == t).unwrap()] += 1;
    }
    let worst = table.iter().zip(&counts).map(|(t, &c)| (c as f64 / 10_000.0 - t.prob).abs()).fold(0.0, f64::max);
    verdict(
        (rate - 0.1).abs() <= 0.01 && worst <= 0.02,
        format!("homogeneous rate {rate:.4} (0.10 +- 0.01); worst triple frequency error {worst:.4} (<= 0.02)"),
    )
}

// ------------------------------------------------------------ criterion 8

fn skewed_blobs(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::Data, 8);
    let mut pts = Vec::new();
    for (centre, count) in [((0.0, 0.0), 90), ((40.0, 40.0), 10)] {
        for _ in 0..count {
            pts.push(vec![centre.0 + rng.gen_range(-3.0..3.0), centre.1 + rng.gen_range(-3.0..3.0)]);
        }
    }
    pts
}

fn exhaustive_sse(xs: &[f64], k: usize) -> f64 {
    let n = xs.len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in xs.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        if counts.contains(&0) {
            continue;
        }
        best = best.min(xs.iter().zip(&labels).map(|(x, &l)| (x - sums[l] / counts[l] as f64).powi(2)).sum());
    }
    best
}

fn criterion_8() -> Outcome {
    let (m, mut balanced, mut iid) = (20, Vec::new(), Vec::new());
    for seed in 0..100u64 {
        let pts = skewed_blobs(seed);
        let h = build_hierarchy(&pts, &[8, 2], 50, seed).unwrap();
        let (_, report) = balanced_sample(&h, m, seed).unwrap();
        balanced.push(*report.entropy.last().unwrap());
        let mut ids: Vec<usize> = (0..pts.len()).collect();
        ids.shuffle(&mut stream_rng(seed, Stream::Curation, 99));
        let top = h.levels.len() - 1;
        let mut occ = vec![0; h.levels[top].centroids.len()];
        ids[..m].iter().for_each(|&i| occ[h.cluster_of(i, top)] += 1);
        iid.push(occupancy_entropy(&occ));
    }
    let (mb, mi) = (median3(balanced), median3(iid));
    let mut exact = 0u64;
    let instances = 40u64;
    for seed in 0..instances {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        let k = rng.gen_range(2..=3);
        let xs: Vec<f64> = (0..k).flat_map(|g| (0..rng.gen_range(1..=3)).map(|_| g as f64 * 100.0 + rng.gen_range(0.0..5.0)).collect::<Vec<_>>()).collect();
        let c = kmeans(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>(), k, 100, seed).unwrap();
        let oracle = exhaustive_sse(&xs, k);
        exact += u64::from((c.sse() - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }
    verdict(
        mb >= mi && exact == instances,
        format!("median top-level entropy balanced {mb:.4} >= iid {mi:.4}; 1-D exhaustive oracle {exact}/{instances} (separated groups)"),
    )
}

// ------------------------------------------------------------ criterion 9

fn criterion_9() -> Outcome {
    let mut teacher = ParamSet::<f64>::new();
    teacher.push("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut student = ParamSet::<f64>::new();
    student.push("w", Tensor::zeros(vec![3]));
    let mut expect = [1.0f64, -2.0, 0.5];
    let mut worst = 0.0f64;
    for _ in 0..50 {
        ema_update(&mut teacher, &student, 0.9).unwrap();
        for (e, got) in expect.iter_mut().zip(teacher.get(0).data()) {
            *e *= 0.9;
            worst = worst.max((got - *e).abs() / e.abs());
        }
    }
    let cfg = ScheduleConfig::default();
    let at_warmup = schedule(cfg.warmup_steps, &cfg).lr;
    let flat = (cfg.warmup_steps..cfg.warmup_steps * 20).step_by(97).all(|s| schedule(s, &cfg).lr == 0.0004);
    verdict(
        worst <= 64.0 * f64::EPSILON && at_warmup == 0.0004 && flat,
        format!("EMA contraction relative error {worst:.1e} over 50 steps (rounding); lr at warmup {at_warmup}; constant after: {flat}"),
    )
}

// ----------------------------------------------------------- criterion 10

fn tiny_overrides(extra: &[&str]) -> Vec<String> {
    let base = [
        "seed=11", "vit.depth=1", "vit.embed_dim=16", "vit.ffn_hidden_dim=16", "vit.head_count=2", "vit.head_dim=8", "vit.register_count=1",
        "dino_head.hidden_dim=16", "dino_head.bottleneck_dim=8", "dino_head.prototype_count=16", "ibot_head.hidden_dim=16",
        "ibot_head.bottleneck_dim=8", "ibot_head.prototype_count=16", "dataset_size=32", "image_size=32", "batch_size=4",
        "crops.global_size=16", "crops.local_size=8", "crops.n_local=2", "loss.koleo_group=4", "schedule.warmup_steps=3", "steps=8",
        "checkpoint_every=4", "gram.source_step=4",
    ];
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = load_config(TrainPhase::Pretrain, None, &tiny_overrides(&[])).unwrap();
        runner::train(TrainPhase::Pretrain, cfg, &dir.path().join(name), &Lineage::default()).unwrap()
    };
    run("a");
    run("b");
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    let same_csv = read("a/metrics.csv") == read("b/metrics.csv");
    // interrupt "b" after its step-4 checkpoint and resume it
    std::fs::remove_file(run_checkpoint(&dir.path().join("b"), 8)).unwrap();
    let resumed = run("b");
    let same_resume = resumed.resumed
        && resumed.start_step == 4
        && read("a/metrics.csv") == read("b/metrics.csv")
        && read("a/checkpoints/step_000008.ckpt") == read("b/checkpoints/step_000008.ckpt");
    verdict(same_csv && same_resume, format!("identical runs give bitwise metrics CSV: {same_csv}; resume from step 4 is bitwise: {same_resume}"))
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient integrity", Box::new(criterion_1)),
        ("2 sinkhorn contract", Box::new(criterion_2)),
        ("3 gram-loss algebra", Box::new(criterion_3)),
        ("6 distillation scheduler oracle", Box::new(criterion_6)),
        ("7 data mixing frequencies", Box::new(criterion_7)),
        ("8 curation balance", Box::new(criterion_8)),
        ("9 EMA and schedules", Box::new(criterion_9)),
        ("10 determinism and resume", Box::new(criterion_10)),
    ];
    let mut results: Vec<(String, Outcome)> = criteria.into_iter().map(|(n, f)| (n.to_string(), f())).collect();
    let (c4, c5) = criteria_4_5();
    results.insert(3, ("4 collapse-and-repair".into(), c4));
    results.insert(4, ("5 high-res Gram superiority".into(), c5));
    let mut failed = 0;
    println!("acceptance:");
    for (name, outcome) in &results {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("SKIP", d),
        };
        println!("criterion {name}: {tag} - {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
