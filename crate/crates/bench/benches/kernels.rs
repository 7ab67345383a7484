use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vitac_core::math::kernels::{gemm_nn, Conv1dGeom};
use vitac_core::math::{rng_from_seed, Tape};
use vitac_core::policy::diffusion::{diffusion_loss, sample_actions, DiffusionConfig, NoisePredictionNet, NoiseSchedule};

fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect()
}

fn gemm(c: &mut Criterion) {
    let (m, k, n) = (32, 160, 1280);
    let (a, b) = (wave(m * k, 0.0), wave(k * n, 1.0));
    let mut out = vec![0.0; m * n];
    c.bench_function("gemm_nn 32x160x1280", |bench| {
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            gemm_nn(m, k, n, black_box(&a), black_box(&b), &mut out);
        })
    });
    let geom = Conv1dGeom { channels: 32, len: 20, kernel: 5, pad: 2 };
    let x = wave(64 * 32 * 20, 2.0);
    let mut cols = vec![0.0; geom.patch_len() * 64 * geom.out_len()];
    c.bench_function("im2col batch 64", |bench| bench.iter(|| geom.im2col_batch(black_box(&x), 64, &mut cols)));
}

fn conv_backward(c: &mut Criterion) {
    let x = wave(64 * 32 * 20, 0.5);
    let w: Vec<f64> = wave(32 * 32 * 5, 1.5).iter().map(|v| 0.1 * v).collect();
    c.bench_function("conv1d forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(&[64, 32, 20], x.clone(), true).unwrap();
            let wv = tape.leaf(&[32, 32, 5], w.clone(), true).unwrap();
            let bv = tape.leaf(&[32], vec![0.0; 32], true).unwrap();
            let y = tape.conv1d(xv, wv, bv, 2).unwrap();
            let l = tape.sum(y).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn diffusion(c: &mut Criterion) {
    let cfg = DiffusionConfig::default();
    let mut rng = rng_from_seed(1);
    let feat_dim = 132;
    let net = NoisePredictionNet::new("bench", feat_dim, 4, cfg.pred_horizon, &cfg, &mut rng);
    let train = NoiseSchedule::linear(cfg.k_train).unwrap();
    let infer = train.subsample(cfg.k_infer).unwrap();
    let feats = wave(64 * feat_dim, 0.2);
    let clean = wave(64 * 4 * cfg.pred_horizon, 0.9);
    c.bench_function("diffusion loss+backward batch 64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let f = tape.constant(&[64, feat_dim], feats.clone()).unwrap();
            let p = net.params();
            let l = diffusion_loss(&mut tape, &net, &p, f, &clean, &train, &mut rng).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
    let one = wave(feat_dim, 0.4);
    c.bench_function("diffusion sample 10 steps", |bench| {
        bench.iter(|| black_box(sample_actions(&net, &one, &infer, &mut rng).unwrap()))
    });
}

criterion_group!(benches, gemm, conv_backward, diffusion);
criterion_main!(benches);
