use proptest::prelude::*;

use vitac_core::data::TrajectoryRecord;
use vitac_core::harness::Config;
use vitac_core::math::kernels::{gemm_nn, gemm_nt, gemm_tn, Conv1dGeom, Conv2dGeom};
use vitac_core::policy::act::{ensemble_weights, EnsembleBuffer};
use vitac_core::policy::diffusion::NoiseSchedule;
use vitac_core::policy::relative_chunk;
use vitac_core::sim::RobotState;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ensemble_weights_normalised_and_decreasing(ages in prop::collection::vec(0usize..40, 1..20), k in 0.01f64..2.0) {
        let w = ensemble_weights(&ages, k);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..ages.len() {
            for j in 0..ages.len() {
                if ages[i] < ages[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn ensemble_stays_within_chunk_range(goals in prop::collection::vec(values(4), 6)) {
        let mut buf = EnsembleBuffer::new(8);
        for (t0, g) in goals.iter().enumerate() {
            buf.push(t0, vec![[g[0], g[1], g[2], g[3]]; 10]);
        }
        let out = buf.ensemble(5, 0.25).unwrap();
        for d in 0..4 {
            let lo = goals.iter().map(|g| g[d]).fold(f64::INFINITY, f64::min);
            let hi = goals.iter().map(|g| g[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[d] >= lo - 1e-12 && out[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn gemm_variants_match_naive((m, k, n) in (1usize..12, 1usize..12, 1usize..12), seed in any::<u64>()) {
        let mut rng = vitac_core::math::rng_from_seed(seed);
        let a: Vec<f64> = (0..m * k).map(|_| vitac_core::math::randn(&mut rng)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| vitac_core::math::randn(&mut rng)).collect();
        let want = naive_gemm(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        prop_assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        prop_assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        prop_assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn conv1d_im2col_adjoint(channels in 1usize..4, len in 3usize..10, kernel in 1usize..4, pad in 0usize..2, batch in 1usize..4, seed in any::<u64>()) {
        let g = Conv1dGeom { channels, len, kernel, pad };
        let mut rng = vitac_core::math::rng_from_seed(seed);
        let x: Vec<f64> = (0..batch * channels * len).map(|_| vitac_core::math::randn(&mut rng)).collect();
        let cols_len = g.patch_len() * batch * g.out_len();
        let y: Vec<f64> = (0..cols_len).map(|_| vitac_core::math::randn(&mut rng)).collect();
        let mut cols = vec![0.0; cols_len];
        g.im2col_batch(&x, batch, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im_batch(&y, batch, &mut back);
        prop_assert!((dot(&cols, &y) - dot(&x, &back)).abs() < 1e-9);
    }

    #[test]
    fn conv2d_im2col_adjoint(channels in 1usize..3, size in 4usize..9, kernel in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()) {
        let g = Conv2dGeom { channels, height: size, width: size + 1, kernel, stride, pad };
        let mut rng = vitac_core::math::rng_from_seed(seed);
        let x: Vec<f64> = (0..channels * size * (size + 1)).map(|_| vitac_core::math::randn(&mut rng)).collect();
        let cols_len = g.patch_len() * g.out_h() * g.out_w();
        let y: Vec<f64> = (0..cols_len).map(|_| vitac_core::math::randn(&mut rng)).collect();
        let mut cols = vec![0.0; cols_len];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        prop_assert!((dot(&cols, &y) - dot(&x, &back)).abs() < 1e-9);
    }

    #[test]
    fn relative_chunk_ignores_translation(
        steps in prop::collection::vec((-2048i32..2048, -2048i32..2048, -2048i32..2048), 2..30),
        shift in (-100i32..100, -100i32..100, -100i32..100),
        h in 1usize..25,
    ) {
        // 1/16 mm grid.
        let q = |v: i32| v as f64 / 16.0;
        let states: Vec<RobotState> = steps.iter().map(|&(x, y, z)| RobotState { x: q(x), y: q(y), z: q(z), width: 10.0 }).collect();
        let goals: Vec<[f64; 4]> = states.iter().map(|s| [s.x + 0.5, s.y - 0.25, s.z, 12.0]).collect();
        let len = states.len();
        let rec = TrajectoryRecord { seed: 0, expert_noise_std: 0.0, images: vec![vec![]; len], tactile: vec![], states, goals };
        let mut moved = rec.clone();
        let (dx, dy, dz) = (shift.0 as f64, shift.1 as f64, shift.2 as f64);
        for s in &mut moved.states {
            s.x += dx;
            s.y += dy;
            s.z += dz;
        }
        for g in &mut moved.goals {
            g[0] += dx;
            g[1] += dy;
            g[2] += dz;
        }
        for t in 0..len {
            prop_assert_eq!(relative_chunk(&rec, t, h), relative_chunk(&moved, t, h));
        }
    }

    #[test]
    fn subsampled_schedule_keeps_endpoints(k in 2usize..200, m_frac in 0.0f64..1.0) {
        let full = NoiseSchedule::linear(k).unwrap();
        let m = 2 + ((k - 2) as f64 * m_frac) as usize;
        let sub = full.subsample(m).unwrap();
        prop_assert_eq!(sub.len(), m);
        prop_assert_eq!(sub.timesteps[0], 0);
        prop_assert_eq!(*sub.timesteps.last().unwrap(), k - 1);
        prop_assert!(sub.timesteps.windows(2).all(|w| w[0] < w[1]));
        for (i, &t) in sub.timesteps.iter().enumerate() {
            prop_assert!((sub.alpha_bar[i] - full.alpha_bar[t]).abs() < 1e-12);
        }
        prop_assert!(sub.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(full.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(sub.sigma[0], 0.0);
    }

    #[test]
    fn seed_overrides_apply(eval in any::<u32>(), episodes in 1usize..500) {
        let cfg = Config::load::<&std::path::Path>(
            &[],
            &[format!("seeds.eval={eval}"), format!("experiment.eval_episodes={episodes}")],
        ).unwrap();
        prop_assert_eq!(cfg.seeds.eval, eval as u64);
        prop_assert_eq!(cfg.experiment.eval_episodes, episodes);
        let back: Config = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
