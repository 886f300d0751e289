use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msvcl_core::contrastive::{nt_xent, EmbeddingSet};
use msvcl_core::detect::Detection;
use msvcl_core::metrics::{mean_ap, GroundTruth};
use msvcl_core::nn::{Encoder, EncoderConfig, Graph, Mode, ParamSet, Tensor};
use msvcl_core::synthgen::LesionClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_3x3_s2");
    for &(cin, cout, hw) in &[(1usize, 16usize, 64usize), (16, 32, 32), (32, 64, 16)] {
        let x = random_tensor(&[8, hw, hw, cin], &mut rng);
        let mut params = ParamSet::<f32>::new();
        let w = params.add("w", random_tensor(&[3, 3, cin, cout], &mut rng), true).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{cin}x{hw}->{cout}")), &x, |b, x| {
            b.iter(|| {
                let mut g = Graph::new(Mode::Train);
                let xi = g.input(x.clone(), false);
                let wi = g.param(&params, w);
                let y = g.conv2d(xi, wi, None, 2, 1).unwrap();
                let loss = g.half_sum_squares(y);
                let mut p = params.clone();
                black_box(g.backward(loss, &mut p).unwrap());
            })
        });
    }
    group.finish();
}

fn encoder_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig::default();
    let mut params = ParamSet::<f32>::new();
    let enc = Encoder::init(&cfg, &mut params, &mut rng).unwrap();
    let x = random_tensor(&[64, 64, 64, 1], &mut rng);
    c.bench_function("encoder_fwd_bwd_batch64", |b| {
        b.iter(|| {
            let mut g = Graph::new(Mode::Train);
            let xi = g.input(x.clone(), false);
            let f = enc.features(&mut g, &params, xi).unwrap();
            let z = enc.project(&mut g, &params, f).unwrap();
            let loss = g.sum(z);
            black_box(g.backward(loss, &mut params).unwrap());
        })
    });
}

fn contrastive(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (64usize, 32usize);
    let mut z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in z.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let emb = EmbeddingSet::new(z, d, (0..n).map(|i| i ^ 1).collect()).unwrap();
    c.bench_function("nt_xent_64x32", |b| b.iter(|| black_box(nt_xent(&emb, 0.2).unwrap())));
}

fn average_precision(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let boxes = |rng: &mut ChaCha8Rng| {
        let (x, y, w) = (rng.random_range(0.0..48.0), rng.random_range(0.0..48.0), rng.random_range(6.0..16.0));
        [x, y, x + w, y + w]
    };
    let class = |rng: &mut ChaCha8Rng| LesionClass::ALL[rng.random_range(0..2)];
    let gts: Vec<GroundTruth> = (0..400)
        .map(|i| GroundTruth { image_id: i / 2, class: class(&mut rng), bbox: boxes(&mut rng) })
        .collect();
    let dets: Vec<Detection> = (0..4000)
        .map(|i| Detection { image_id: i / 20, class: class(&mut rng), score: rng.random(), bbox: boxes(&mut rng) })
        .collect();
    c.bench_function("mean_ap_4000_dets", |b| {
        b.iter(|| black_box(mean_ap(&dets, &gts, &LesionClass::ALL, 0.5).unwrap()))
    });
}

criterion_group!(benches, conv, encoder_step, contrastive, average_precision);
criterion_main!(benches);
