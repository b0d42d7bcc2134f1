use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mvad_bench::{benchmark_cloud, benchmark_settings, benchmark_state};
use mvad_core::encoder::encode_image;
use mvad_core::geometry::normalize_cloud;
use mvad_core::pipeline::score_cloud;
use mvad_core::rendering::render_all;
use mvad_core::training::{backward, build_cloud_loss_graph, TrainConfig};

fn bench_render(c: &mut Criterion) {
    let cloud = normalize_cloud(&benchmark_cloud());
    let state = benchmark_state();
    let settings = benchmark_settings();
    let rig = settings.rig(state.config()).unwrap();
    c.bench_function("render_9_views_800pts", |b| {
        b.iter(|| black_box(render_all(&cloud, &rig, settings.splat_radius).unwrap()))
    });
}

fn bench_encode(c: &mut Criterion) {
    let cloud = normalize_cloud(&benchmark_cloud());
    let state = benchmark_state();
    let settings = benchmark_settings();
    let rig = settings.rig(state.config()).unwrap();
    let rendered = render_all(&cloud, &rig, settings.splat_radius).unwrap();
    let image = &rendered.normalized[0];
    c.bench_function("encode_image_64px", |b| {
        b.iter(|| {
            black_box(
                encode_image(image, &state.backbone, &state.banks.visual, state.config()).unwrap(),
            )
        })
    });
}

fn bench_score(c: &mut Criterion) {
    let cloud = benchmark_cloud();
    let state = benchmark_state();
    let settings = benchmark_settings();
    c.bench_function("score_cloud_end_to_end", |b| {
        b.iter(|| black_box(score_cloud(&state, &settings, &cloud).unwrap()))
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cloud = benchmark_cloud();
    let state = benchmark_state();
    let settings = benchmark_settings();
    let tcfg = TrainConfig::default();
    c.bench_function("forward_backward_one_cloud", |b| {
        b.iter(|| {
            let cg =
                build_cloud_loss_graph(&cloud, &state.backbone, &state.banks, &settings, &tcfg)
                    .unwrap();
            black_box(backward(&cg).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_render, bench_encode, bench_score, bench_train_step
}
criterion_main!(benches);
