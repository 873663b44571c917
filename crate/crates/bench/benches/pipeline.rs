use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ifrp_core::dataset::{center_crop_resize, synthetic_face};
use ifrp_core::eval::{fsim, psnr, ssim};
use ifrp_core::losses::{ExtractorSpec, FeatureExtractor};
use ifrp_core::stn::{bilinear_sample, generate_grid, params_to_affine};
use ifrp_core::style::log_euclidean_distance;
use ifrp_core::trainer::{train_step, TrainConfig, TrainState};
use ifrp_core::{Srn, SrnConfig, Tensor, TransformParams};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_sampler(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[8, 16, 32, 32], -1.0, 1.0, &mut rng);
    let m = params_to_affine(&TransformParams::new(0.1, 0.3, 0.05, -0.02));
    let one = generate_grid(&m, 32, 32);
    let grid = Tensor::new(&[8, 32, 32, 2], one.data().repeat(8)).unwrap();
    c.bench_function("bilinear_sample 8x16x32x32", |b| b.iter(|| bilinear_sample(&x, &grid).unwrap()));
}

fn bench_networks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let srn = Srn::build(SrnConfig::desk(), 0).unwrap();
    let x = Tensor::uniform(&[16, 3, 32, 32], -1.0, 1.0, &mut rng);
    c.bench_function("srn infer 16x32", |b| b.iter(|| srn.infer(&x).unwrap()));

    let sf = Tensor::uniform(&[16, 3, 32, 32], -1.0, 1.0, &mut rng);
    let rf = Tensor::uniform(&[16, 3, 32, 32], -1.0, 1.0, &mut rng);
    let psi: Box<dyn FeatureExtractor> = ExtractorSpec::default().build().unwrap();
    let state = TrainState::new(TrainConfig::default()).unwrap();
    c.bench_function("train step 16x32", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, psi.as_ref(), &sf, &rf).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn bench_metrics(c: &mut Criterion) {
    let a = center_crop_resize(&synthetic_face(0, 0, 218, 178), 64).unwrap();
    let b = center_crop_resize(&synthetic_face(0, 1, 218, 178), 64).unwrap();
    c.bench_function("psnr 64", |bch| bch.iter(|| psnr(&a, &b).unwrap()));
    c.bench_function("ssim 64", |bch| bch.iter(|| ssim(&a, &b).unwrap()));
    c.bench_function("fsim 64", |bch| bch.iter(|| fsim(&a, &b).unwrap()));
}

fn bench_log_euclidean(c: &mut Criterion) {
    let n = 32;
    let f = DMatrix::from_fn(n, 2 * n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
    let g = DMatrix::from_fn(n, 2 * n, |i, j| ((i * 5 + j * 2) % 13) as f64 / 13.0 - 0.5);
    let a = &f * f.transpose() / (2 * n) as f64;
    let b = &g * g.transpose() / (2 * n) as f64;
    c.bench_function("log-euclidean 32x32", |bch| bch.iter(|| log_euclidean_distance(&a, &b, 1e-6).unwrap()));
}

criterion_group!(benches, bench_sampler, bench_networks, bench_metrics, bench_log_euclidean);
criterion_main!(benches);
