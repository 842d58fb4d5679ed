//! Compares the data-parallel path against a single-thread pool on the
//! gemm-per-block kernel that dominates attention, plus a full model forward
//! pass on the default pool for context.

use criterion::{criterion_group, criterion_main, Criterion};

use clops_core::elem::Elem;
use clops_core::etl::{gen_synthetic, SyntheticParams};
use clops_core::features::sample_windows;
use clops_core::model::{build_model, forward, ForwardMode, ModelConfig};
use clops_core::tensor::Graph;
use clops_core::util::par_map_collect;

const BLOCKS: usize = 16;
const T: usize = 120;
const D: usize = 64;

fn blocks() -> (Vec<Vec<f32>>, Vec<f32>) {
    let a: Vec<Vec<f32>> = (0..BLOCKS)
        .map(|b| (0..T * D).map(|i| ((b * 31 + i) % 97) as f32 * 0.01).collect())
        .collect();
    let w: Vec<f32> = (0..D * D).map(|i| (i % 89) as f32 * 0.01).collect();
    (a, w)
}

/// One gemm per independent block, the same layout the batched matmul uses.
fn kernel(a: &[Vec<f32>], w: &[f32]) -> Vec<Vec<f32>> {
    par_map_collect(a.len(), |b| {
        let mut out = vec![0.0f32; T * D];
        f32::gemm(T, D, D, 1.0, &a[b], w, 0.0, &mut out);
        out
    })
}

fn forward_once(
    cfg: &ModelConfig,
    store: &clops_core::tensor::ParamStore<f32>,
    coll: &[clops_core::etl::TimeSeriesRecord],
) {
    let batch = sample_windows(coll, 8, cfg.l, cfg.h, 0, 0).unwrap();
    let mut g: Graph<f32> = Graph::new();
    let out = forward(&mut g, store, cfg, &batch, ForwardMode::Train).unwrap();
    std::hint::black_box(out);
}

fn bench_kernel(c: &mut Criterion) {
    let (a, w) = blocks();
    let mut group = c.benchmark_group("block_gemm");
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function("sequential_1_thread", |b| {
            b.iter(|| single.install(|| std::hint::black_box(kernel(&a, &w))))
        });
        group.bench_function("parallel_default_pool", |b| {
            b.iter(|| std::hint::black_box(kernel(&a, &w)))
        });
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential_feature_off", |b| {
        b.iter(|| std::hint::black_box(kernel(&a, &w)))
    });
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let store = build_model::<f32>(&cfg, 0);
    let coll = gen_synthetic(16, 400, 1, &SyntheticParams::default());
    let mut group = c.benchmark_group("forward_pass");
    group.sample_size(10);
    group.bench_function("tiny_batch8", |b| b.iter(|| forward_once(&cfg, &store, &coll)));
    group.finish();
}

criterion_group!(benches, bench_kernel, bench_forward);
criterion_main!(benches);
