use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use featsharp::downsample::{attention_downsample, DownsamplerParams};
use featsharp::jbu::{jbu_upsample, JbuConfig, JbuParams};
use featsharp::numerics::init;
use featsharp::sharpen::attention_core;
use featsharp::upsampler::UpsamplerKind;
use featsharp::{ParamStore, Tape};
use featsharp_bench::{image, Fixture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn upsample_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("upsample");
    group.sample_size(10);
    for kind in UpsamplerKind::ALL {
        let fx = Fixture::new(kind, 32, 2);
        group.throughput(Throughput::Elements(fx.output_tokens() as u64));
        group.bench_function(BenchmarkId::new("features_cached", kind.as_str()), |b| {
            b.iter(|| black_box(fx.upsample()))
        });
        group.bench_function(BenchmarkId::new("end_to_end", kind.as_str()), |b| {
            b.iter(|| black_box(fx.end_to_end()))
        });
    }
    group.finish();
}

fn featsharp_factors(c: &mut Criterion) {
    let mut group = c.benchmark_group("featsharp_factor");
    group.sample_size(10);
    for z in [2, 3, 4] {
        let fx = Fixture::new(UpsamplerKind::FeatSharp, 16, z);
        group.throughput(Throughput::Elements(fx.output_tokens() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(z), &fx, |b, fx| b.iter(|| black_box(fx.end_to_end())));
    }
    group.finish();
}

fn jbu_stage(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = JbuParams::new("jbu.0", JbuConfig::default());
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng);
    let f_lr = init::normal(&mut rng, 16, 16, 16, 1.0);
    let guidance = image(32, 2);
    c.bench_function("jbu_stage_16_to_32", |b| {
        b.iter(|| black_box(jbu_upsample(&f_lr, &guidance, &p, &store, 2).unwrap()))
    });
}

fn local_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = init::normal(&mut rng, 32, 32, 32, 1.0);
    let k = init::normal(&mut rng, 32, 32, 32, 1.0);
    let v = init::normal(&mut rng, 32, 32, 32, 1.0);
    let mut group = c.benchmark_group("local_attention_32x32x32");
    for window in [3, 5, 7] {
        group.bench_with_input(BenchmarkId::from_parameter(window), &window, |b, &w| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                let out = attention_core(&mut tape, qv, kv, vv, w).unwrap();
                black_box(tape.value(out).len())
            })
        });
    }
    group.finish();
}

fn downsampler(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = DownsamplerParams::new("down", 16, 7, 2).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store);
    let f_hr = init::normal(&mut rng, 32, 32, 16, 1.0);
    c.bench_function("attention_downsample_32_to_16", |b| {
        b.iter(|| black_box(attention_downsample(&f_hr, &p, &store).unwrap()))
    });
}

criterion_group!(benches, upsample_paths, featsharp_factors, jbu_stage, local_attention, downsampler);
criterion_main!(benches);
