use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use gramssl_core::curation::kmeans;
use gramssl_core::objectives::{sinkhorn_knopp, HeadConfig};
use gramssl_core::rng::{stream_rng, Stream};
use gramssl_core::train::{build_batch, train_step, CropConfig, MaskConfig, Model, ObjectiveConfig, ScheduleConfig, ShapesDataset, StudentNoise, TrainState};
use gramssl_core::vit::{forward_graph, CropKind, ForwardOptions, ViTConfig};
use gramssl_core::{Graph, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = stream_rng(seed, Stream::Data, 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let a = random(&[256, 256], 1);
    let b = random(&[256, 256], 2);
    c.bench_function("matmul_256", |bench| bench.iter(|| black_box(a.matmul(&b).unwrap())));
    c.bench_function("matmul_256_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
            let y = g.matmul(va, vb).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(va).is_some())
        })
    });
}

fn vit_forward(c: &mut Criterion) {
    let model = Model::<f32>::init(ViTConfig::default(), HeadConfig::default(), HeadConfig::default(), &mut stream_rng(1, Stream::Init, 0)).unwrap();
    let images = ShapesDataset::generate(16, 32, 1).unwrap().images;
    c.bench_function("vit_forward_16x32px", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let vars = model.backbone.params.bind(&mut g, false);
            let opts = ForwardOptions { crop_kind: Some(CropKind::Global), ..Default::default() };
            black_box(forward_graph(&mut g, &model.backbone, &vars, &images, &opts).unwrap().patches)
        })
    });
}

fn step(c: &mut Criterion) {
    let ds = ShapesDataset::generate(16, 64, 1).unwrap();
    let model = Model::<f32>::init(ViTConfig::default(), HeadConfig::default(), HeadConfig::default(), &mut stream_rng(1, Stream::Init, 0)).unwrap();
    let mut state = TrainState::new(model);
    let imgs: Vec<&Tensor<f32>> = ds.images.iter().collect();
    let noise = StudentNoise { jitter_range: Some((0.5, 2.0)), depth: 4, drop_rate: 0.0 };
    let batch = build_batch(&imgs, (0..16).collect(), &CropConfig::default(), &MaskConfig::default(), 8, None, noise, 1, 0).unwrap();
    let (sched, obj) = (ScheduleConfig::default(), ObjectiveConfig::default());
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    let mut s = 0;
    g.bench_function("train_step_default_b16", |bench| {
        bench.iter(|| {
            s += 1;
            black_box(train_step(&mut state, &batch, &sched, &obj, s).unwrap())
        })
    });
    g.finish();
}

fn sinkhorn(c: &mut Criterion) {
    let scores = random(&[128, 128], 3);
    c.bench_function("sinkhorn_128x128_3it", |bench| bench.iter(|| black_box(sinkhorn_knopp(&scores, 3, 0.07).unwrap())));
}

fn clustering(c: &mut Criterion) {
    let mut rng = stream_rng(4, Stream::Data, 0);
    let points: Vec<Vec<f64>> = (0..1000).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut g = c.benchmark_group("curation");
    g.sample_size(10);
    g.bench_function("kmeans_1000x16_k16", |bench| bench.iter(|| black_box(kmeans(&points, 16, 50, 0).unwrap().sse())));
    g.finish();
}

criterion_group!(benches, matmul, vit_forward, step, sinkhorn, clustering);
criterion_main!(benches);
