use cheems::attention::{AttnConfig, AttnLayer, ValueMode};
use cheems::cdmmoe::{exhaustive_top_k, product_top_k};
use cheems::model::{Model, ModelConfig};
use cheems::rng;
use cheems::rope::RopeTable;
use cheems::ssd::{ssd_chunked, ssd_quadratic, PositionalMode, SsdConfig, SsdLayer};
use cheems::{ParamStore, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const LENS: [usize; 3] = [256, 512, 1024];

fn ssd_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("ssd_kernel");
    group.sample_size(10);
    let mut r = rng::stream(0, "bench.ssd");
    for l in LENS {
        let x: Tensor<f32> = rng::normal(&mut r, &[1, l, 1, 64], 1.0);
        let b: Tensor<f32> = rng::normal(&mut r, &[1, l, 1, 64], 1.0);
        let cm: Tensor<f32> = rng::normal(&mut r, &[1, l, 1, 64], 1.0);
        let a: Tensor<f32> = rng::uniform(&mut r, &[1, l, 1], 0.5, 1.0);
        group.throughput(Throughput::Elements(l as u64));
        group.bench_with_input(BenchmarkId::new("chunked", l), &l, |bench, _| {
            bench.iter(|| ssd_chunked(black_box(&x), &b, &cm, &a, 64).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("quadratic", l), &l, |bench, _| {
            bench.iter(|| ssd_quadratic(black_box(&x), &b, &cm, &a).unwrap())
        });
    }
    group.finish();
}

fn ssd_cfg() -> SsdConfig {
    SsdConfig {
        d_model: 64,
        n_heads: 1,
        head_dim: 64,
        d_state: 64,
        chunk_len: 64,
        conv_width: 4,
    }
}

fn layers(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_forward_backward");
    group.sample_size(10);
    let mut r = rng::stream(0, "bench.layers");
    let mut store = ParamStore::<f32>::new();
    let ssd = SsdLayer::init(&mut store, "ssd", &ssd_cfg(), PositionalMode::Rope, &mut r, 0.02).unwrap();
    let attn_cfg = AttnConfig {
        d_model: 64,
        n_heads: 1,
        head_dim: 64,
        value_mode: ValueMode::InnerSsd,
        inner_mode: PositionalMode::GateOnly,
    };
    let attn = AttnLayer::init(&mut store, "attn", &attn_cfg, &ssd_cfg(), &mut r, 0.02).unwrap();
    let rope = RopeTable::new(10_000.0, 64, 1024).unwrap();
    for l in LENS {
        let x: Tensor<f32> = rng::normal(&mut r, &[1, l, 64], 1.0);
        group.throughput(Throughput::Elements(l as u64));
        group.bench_with_input(BenchmarkId::new("ssd", l), &l, |bench, _| {
            bench.iter(|| {
                let mut g = store.bind();
                let xv = g.constant(x.clone());
                let y = ssd.forward(&mut g, xv, &rope).unwrap();
                let s = g.sum(y);
                black_box(g.backward(s).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("attention", l), &l, |bench, _| {
            bench.iter(|| {
                let mut g = store.bind();
                let xv = g.constant(x.clone());
                let y = attn.forward(&mut g, xv, &rope).unwrap();
                let s = g.sum(y);
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
    let tokens: Vec<usize> = (0..8 * 63).map(|i| (i * 7 + 3) % 64).collect();
    group.throughput(Throughput::Elements(tokens.len() as u64));
    group.bench_function("forward_8x63", |bench| bench.iter(|| m.logits(black_box(&tokens), 8, 63).unwrap()));
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("top_k");
    let mut r = rng::stream(0, "bench.pk");
    let s1: Vec<f32> = rng::normal::<f32>(&mut r, &[64], 1.0).into_data();
    let s2: Vec<f32> = rng::normal::<f32>(&mut r, &[64], 1.0).into_data();
    group.bench_function("product_4096", |bench| bench.iter(|| product_top_k(black_box(&s1), &s2, 16).unwrap()));
    group.bench_function("exhaustive_4096", |bench| bench.iter(|| exhaustive_top_k(black_box(&s1), &s2, 16).unwrap()));
    group.finish();
}

criterion_group!(benches, ssd_kernels, layers, model_step, retrieval);
criterion_main!(benches);
