use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use vqgenome::numerics::{softmax_xent, Conv1d, Linear, ParamSlot};
use vqgenome::rng::{keyed, Stream};
use vqgenome::tokenizer::TokenizerConfig;
use vqgenome::vqvae::{Codebook, LossWeights, ModelConfig, Objective, VqVae};
use vqgenome_bench::{random_batch, random_tensor};

const ROWS: usize = 32 * 150;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv1d");
    g.throughput(Throughput::Elements(ROWS as u64));
    let mut rng = keyed(1, Stream::Init, &[]);
    let layer = Conv1d::new(
        ParamSlot::xavier("w", &[3, 128, 256], 3 * 128, 3 * 256, &mut rng),
        ParamSlot::zeros("b", &[256], false),
    );
    let x = random_tensor(&[ROWS, 128], 2);
    g.bench_function("forward_128_256", |b| b.iter(|| layer.forward(black_box(&x), 150).unwrap()));
    g.finish();
}

fn linear(c: &mut Criterion) {
    let mut g = c.benchmark_group("linear");
    g.throughput(Throughput::Elements(ROWS as u64));
    let mut rng = keyed(1, Stream::Init, &[]);
    let mut layer =
        Linear::new(ParamSlot::xavier("w", &[256, 4099], 256, 4099, &mut rng), ParamSlot::zeros("b", &[4099], false));
    let x = random_tensor(&[ROWS, 256], 3);
    let dy = random_tensor(&[ROWS, 4099], 4);
    g.bench_function("forward_256_4099", |b| b.iter(|| layer.forward(black_box(&x)).unwrap()));
    g.bench_function("backward_256_4099", |b| b.iter(|| layer.backward(black_box(&x), &dy, true)));
    g.finish();
}

fn quantize(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantize");
    g.throughput(Throughput::Elements(ROWS as u64));
    let book = Codebook::<f32>::new(512, 64, 0.95, &mut keyed(1, Stream::Init, &[]));
    let z = random_tensor(&[ROWS, 64], 5);
    let valid = vec![true; ROWS];
    g.bench_function("nearest_512x64", |b| b.iter(|| book.quantize(black_box(&z), &valid)));
    let assignments = book.quantize(&z, &valid).assignments;
    g.bench_function("ema_update_512x64", |b| {
        b.iter_batched(|| book.clone(), |mut bk| bk.ema_update(&z, &assignments), BatchSize::LargeInput)
    });
    g.finish();
}

fn xent(c: &mut Criterion) {
    let mut g = c.benchmark_group("softmax_xent");
    g.throughput(Throughput::Elements(ROWS as u64));
    let logits = random_tensor(&[ROWS, 4099], 6);
    let targets: Vec<u32> = (0..ROWS as u32).map(|i| (i * 7919) % 4099).collect();
    g.bench_function("rows_x_4099", |b| {
        b.iter_batched(|| logits.clone(), |l| softmax_xent(l, &targets).unwrap(), BatchSize::LargeInput)
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("vqvae");
    g.sample_size(10);
    let tok = TokenizerConfig::default();
    let batch = random_batch(32, &tok, 7);
    let objective = Objective::reconstruction(&batch);
    let mut model = VqVae::<f32>::new(ModelConfig::default(), 512, 0.95, &mut keyed(42, Stream::Init, &[]));
    let weights = LossWeights::default();
    let mut rng = keyed(42, Stream::Dropout, &[]);
    g.bench_function("step_batch32", |b| {
        b.iter(|| {
            model.params.zero_grad();
            model.step(&batch, &objective, &weights, true, true, &mut rng).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, conv, linear, quantize, xent, train_step);
criterion_main!(benches);
