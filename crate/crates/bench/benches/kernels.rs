use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mvpl_bench::{dataset, desk_config, tensor, translating_clip};
use mvpl_core::tensorlab::{Conv3dParams, Tape};
use mvpl_core::trainer::{train_step, Schedule, TrainData, TrainState};
use mvpl_core::views::{build_viewset, estimate_flow, FlowParams};

fn conv3d(c: &mut Criterion) {
    let x = tensor(&[8, 8, 16, 16, 8], 1);
    let k = tensor(&[3, 3, 3, 8, 16], 2);
    let same = Conv3dParams::same([3, 3, 3]);
    c.bench_function("conv3d forward 8x8x16x16x8 -> 16", |b| {
        b.iter(|| {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k.clone());
            black_box(tape.conv3d(xv, kv, same).unwrap());
        })
    });
    c.bench_function("conv3d forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let kv = tape.param(k.clone());
            let y = tape.conv3d(xv, kv, same).unwrap();
            let n = tape.value(y).len();
            let loss = tape.weighted_sum(y, vec![1.0 / n as f64; n]).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn flow(c: &mut Criterion) {
    let clip = translating_clip(8, 20);
    let params = FlowParams::default();
    c.bench_function("horn-schunck 8 frames 20x20", |b| b.iter(|| black_box(estimate_flow(&clip, &params).unwrap())));
    c.bench_function("viewset 8 frames 20x20", |b| b.iter(|| black_box(build_viewset(&clip, &params).unwrap())));
}

fn step(c: &mut Criterion) {
    let (ds, vs) = dataset(20, 4).unwrap();
    let data = TrainData::from_dataset(&ds, &vs);
    let mut group = c.benchmark_group("train step");
    group.sample_size(10);
    for (name, views) in [("rgb", 1), ("rgb+flow+tg", 3)] {
        let mut cfg = desk_config(16);
        cfg.views.truncate(views);
        if views == 1 {
            cfg.strategy = mvpl_core::ssl_core::Strategy::Own;
        }
        let schedule = Schedule::new(&cfg, data.labeled.len());
        let mut state = TrainState::new(&cfg).unwrap();
        group.bench_function(name, |b| b.iter(|| black_box(train_step(&mut state, &data, &cfg, 0, 0, &schedule).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, conv3d, flow, step);
criterion_main!(benches);
