use adajudge_bench::{bench_dataset, bench_model_config};
use adajudge_core::training::{record_pair_loss, train};
use adajudge_core::{AdaJudge, Tape, TrainConfig, Variant};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn forward(c: &mut Criterion) {
    let data = bench_dataset(4).unwrap();
    let seq = data.store.get(data.pairs[0].chosen).unwrap();
    let mut group = c.benchmark_group("forward");
    for variant in [Variant::Full, Variant::NoRefine] {
        let model = AdaJudge::new(bench_model_config(), variant, 0).unwrap();
        group.bench_function(variant.name(), |b| b.iter(|| model.reward(black_box(seq)).unwrap().reward));
    }
    group.finish();
}

fn pair_gradient(c: &mut Criterion) {
    let data = bench_dataset(4).unwrap();
    let model = AdaJudge::new(bench_model_config(), Variant::Full, 0).unwrap();
    let loss = TrainConfig::default().loss;
    c.bench_function("pair_loss_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = model.store().bind(&mut tape, true);
            let rec = record_pair_loss(&model, &mut tape, &params, &data, &data.pairs[0], &loss).unwrap();
            tape.backward(rec.loss).unwrap();
            black_box(tape.len())
        })
    });
}

fn train_steps(c: &mut Criterion) {
    let data = bench_dataset(50).unwrap();
    let cfg = TrainConfig {
        total_steps: 10,
        model: bench_model_config(),
        ..Default::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("10_steps_batch_8", |b| b.iter(|| train(&data, &cfg, None).unwrap().log.len()));
    group.finish();
}

criterion_group!(benches, forward, pair_gradient, train_steps);
criterion_main!(benches);
