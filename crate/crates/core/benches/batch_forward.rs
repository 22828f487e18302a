use actlumos::clipgen::{generate_dataset, Dims};
use actlumos::encoder::{clip_embedding, Encoder, EncoderConfig};
use actlumos::par;
use actlumos::rng;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn encode_batch(c: &mut Criterion) {
    let data = generate_dataset(10, 4, Dims::new(16, 32, 32), 0).unwrap();
    let clips: Vec<_> = data.clips.iter().take(16).map(|r| data.render(r).unwrap()).collect();
    let encoder = Encoder::new(EncoderConfig::default(), &mut rng::seeded(0)).unwrap();
    let embed = |clip: &_| clip_embedding(&encoder.encode(clip).unwrap()).unwrap();

    let mut group = c.benchmark_group("encode_batch_16");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("path", "sequential"), |b| b.iter(|| par::map_sequential(&clips, embed)));
    group.bench_function(BenchmarkId::new("path", if par::is_parallel() { "rayon" } else { "rayon-disabled" }), |b| {
        b.iter(|| par::map(&clips, embed))
    });
    group.finish();
}

criterion_group!(benches, encode_batch);
criterion_main!(benches);
