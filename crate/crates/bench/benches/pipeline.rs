use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use plin_core::flow::midpoint_flows;
use plin_core::nn::model::color_tensor;
use plin_core::nn::{Cascade, CascadeConfig, Init, Mode, ParamStore, Tape};
use plin_core::pseudo_lidar::back_project;
use plin_core::synth::{make_sample, RandomSceneConfig};
use plin_core::warp::backward_warp;
use plin_core::WarpedPair;

/// A KITTI-sized crop (1216x256) and a training-sized scene (64x64).
fn scene(width: usize, height: usize) -> plin_core::synth::SynthSample {
    let config = RandomSceneConfig {
        width,
        height,
        size: [height as f64 / 4.0, height as f64 / 2.0],
        ..RandomSceneConfig::default()
    };
    make_sample(&config.sample(0).unwrap()).unwrap().0
}

fn classical(c: &mut Criterion) {
    let s = scene(1216, 256);
    let (to_prev, to_next) = midpoint_flows(&s.flow_fwd, &s.flow_bwd).unwrap();
    let k = plin_core::CameraIntrinsics::new(721.5, 721.5, 608.0, 128.0).unwrap();
    let mut g = c.benchmark_group("classical_1216x256");
    g.bench_function("midpoint_flows", |b| b.iter(|| midpoint_flows(black_box(&s.flow_fwd), black_box(&s.flow_bwd)).unwrap()));
    g.bench_function("backward_warp", |b| b.iter(|| backward_warp(black_box(&s.d_prev), black_box(&to_prev)).unwrap()));
    g.bench_function("warp_and_fuse", |b| {
        b.iter(|| WarpedPair::compute(black_box(&s.d_prev), black_box(&s.d_next), &to_prev, &to_next, 0.5).unwrap())
    });
    g.bench_function("back_project_dense", |b| b.iter(|| back_project(black_box(&s.gt), &k)));
    g.finish();
}

fn network(c: &mut Criterion) {
    let s = scene(64, 64);
    let input = s.motion_input(0.5).unwrap();
    let color = color_tensor::<f32>(&s.color);
    let mut g = c.benchmark_group("cascade_64x64");
    g.sample_size(20);
    for (name, config) in [("tiny", CascadeConfig::tiny()), ("default", CascadeConfig::default())] {
        let mut params = ParamStore::<f32>::new();
        let cascade = Cascade::build(&config, &mut params, Init::Seeded(0)).unwrap();
        g.bench_function(format!("{name}_predict"), |b| b.iter(|| cascade.predict(&params, black_box(&input.stack), &color).unwrap()));
        g.bench_function(format!("{name}_coarse_forward"), |b| b.iter(|| cascade.coarse_forward(&params, black_box(&input.stack)).unwrap()));
        g.bench_function(format!("{name}_forward_backward"), |b| {
            b.iter(|| {
                let mut tape = Tape::new(&params, Mode::Train);
                let vars = cascade.forward(&mut tape, black_box(&input.stack), &color).unwrap();
                let seed = tape.value(vars.refined).map(|_| 1.0);
                tape.backward(&[(vars.refined, seed)])
            })
        });
    }
    g.finish();
}

criterion_group!(benches, classical, network);
criterion_main!(benches);
