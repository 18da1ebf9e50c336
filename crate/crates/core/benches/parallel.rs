use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pvmap::arch::segmenter_with;
use pvmap::dataset::{extract, rasterize, synth_scene, ExtractConfig, PatchSample, SynthConfig};
use pvmap::network::{Init, Network};
use pvmap::par;
use pvmap::stitch::{blend, plan_tiles, predict_tiles, BlendWindow};
use pvmap::train::batch_gradient;

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn run<R>(sequential: bool, f: impl FnOnce() -> R) -> R {
    if sequential {
        par::sequential(f)
    } else {
        f()
    }
}

fn network() -> Network<f32> {
    let spec = segmenter_with(&[8, 16, 16], &[16, 16, 8]).unwrap();
    Network::new(&spec, Init::FanInUniform { seed: 1 })
}

fn bench_tiles(c: &mut Criterion) {
    let net = network();
    let (raster, _) = synth_scene("bench", 1, 128, 128, 3, &SynthConfig::default()).unwrap();
    let plan = plan_tiles(raster.width, raster.height, 20).unwrap();
    let tiles = predict_tiles(&net, &raster, &plan).unwrap();
    let window = BlendWindow::default();

    let mut g = c.benchmark_group("predict_tiles");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(seq, || predict_tiles(&net, &raster, &plan).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("blend");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(seq, || blend(&tiles, &plan, &window).unwrap()))
        });
    }
    g.finish();
}

fn bench_training(c: &mut Criterion) {
    let net = network();
    let scenes: Vec<_> = (0..2)
        .map(|i| {
            let (r, a) = synth_scene(&format!("b{i}"), i, 128, 128, 4, &SynthConfig::default()).unwrap();
            let m = rasterize(&a).unwrap();
            (r, m)
        })
        .collect();
    let cfg = ExtractConfig::default();
    let samples = extract(&scenes, &cfg, 3).unwrap();
    let batch: Vec<&PatchSample> = samples.iter().take(32).collect();

    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(seq, || batch_gradient(&net, &batch).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("extract");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(seq, || extract(&scenes, &cfg, 3).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_tiles, bench_training);
criterion_main!(benches);
