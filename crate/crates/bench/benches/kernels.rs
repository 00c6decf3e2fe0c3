use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vad_bench::fixture;
use vad_core::cells::{conv_lstm_step, init_state, sho_conv_lstm_step, CellParams};
use vad_core::conv::conv2d;
use vad_core::losses::{mixed_loss, ssim_mean, GaussianWindow};
use vad_core::optim::{Adam, AdamConfig};
use vad_core::trainer::train_step;
use vad_core::{build_model, LossConfig, ModelConfig, Tensor};

fn bench_conv(c: &mut Criterion) {
    let x = fixture::<f32>([8, 16, 16, 16], 1);
    let w = fixture::<f32>([32, 16, 3, 3], 2);
    c.bench_function("conv2d 8x16x16x16 -> 32, k3 s2", |b| {
        b.iter(|| conv2d(&x, &w, None, 2, 1).unwrap())
    });
}

fn bench_cells(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plain = CellParams::<f32>::random(32, 32, 0, 5, &mut rng);
    let sho = CellParams::<f32>::random(32, 32, 32, 5, &mut rng);
    let x = fixture::<f32>([8, 32, 8, 8], 3);
    let h_enc = fixture::<f32>([8, 32, 8, 8], 4);
    let state = init_state::<f32>(8, 32, 8, 8).unwrap();
    c.bench_function("convlstm step 32ch 8x8 b8", |b| {
        b.iter(|| conv_lstm_step(&x, &state, &plain).unwrap())
    });
    c.bench_function("sho convlstm step 32ch 8x8 b8", |b| {
        b.iter(|| sho_conv_lstm_step(&x, &state, &h_enc, &sho).unwrap())
    });
}

fn bench_losses(c: &mut Criterion) {
    let p = fixture::<f32>([8, 1, 32, 32], 5);
    let q = fixture::<f32>([8, 1, 32, 32], 6);
    let cfg = LossConfig::default();
    let win = GaussianWindow::<f32>::gaussian(cfg.ssim_window, cfg.ssim_sigma).unwrap();
    c.bench_function("ssim 8x32x32", |b| {
        b.iter(|| ssim_mean(&p, &q, &win, cfg.constants()).unwrap())
    });
    c.bench_function("mixed loss 8x32x32", |b| b.iter(|| mixed_loss(&p, &q, &cfg).unwrap()));
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        stage_channels: vec![8, 16],
        ..ModelConfig::desk()
    };
    let mut model = build_model::<f32>(&cfg).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), model.params().tensors());
    let ctx = vad_core::losses::LossContext::new(&LossConfig::default()).unwrap();
    let (h, w) = cfg.frame_size;
    let frames: Vec<Tensor<f32>> = (0..cfg.clip_len + cfg.horizon)
        .map(|t| fixture([2, cfg.in_channels, h, w], 10 + t as u64))
        .collect();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step b2, stages 8-16", |b| {
        b.iter(|| train_step(&mut model, &mut opt, &frames, &ctx, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_cells, bench_losses, bench_train_step);
criterion_main!(benches);
