use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vitac_core::data::{observe, SensorConfig};
use vitac_core::sim::{Action, Env, EnvConfig};
use vitac_core::tactile::{mean_abs_tangential_strain, render_lab};

fn rollout(c: &mut Criterion) {
    let env = Env::new(EnvConfig::default()).unwrap();
    let sensors = SensorConfig::default();
    let state = env.reset(3);
    c.bench_function("env step", |bench| {
        let a = Action::new(0.5, -0.5, -1.0, 20.0);
        bench.iter(|| black_box(env.step(&state, &a).unwrap()))
    });
    c.bench_function("observe (3 cameras + tactile)", |bench| {
        bench.iter(|| black_box(observe(&env, &state, &sensors).unwrap()))
    });
    let obs = observe(&env, &state, &sensors).unwrap();
    c.bench_function("strain metric", |bench| bench.iter(|| black_box(mean_abs_tangential_strain(&obs.tactile))));
    c.bench_function("lab render", |bench| bench.iter(|| black_box(render_lab(&obs.tactile))));
}

criterion_group!(benches, rollout);
criterion_main!(benches);
