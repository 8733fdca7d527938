use criterion::{criterion_group, criterion_main, Criterion};
use spangrad::attention::GradConfig;
use spangrad::data::{encode, inputs_and_targets, synthetic_corpus, SequenceDataset};
use spangrad::grad::ScaleConfig;
use spangrad::model::{loss_and_grads, model_forward, Dropout, ModelConfig, ModelState};

fn desk(grad: GradConfig) -> ModelConfig {
    ModelConfig {
        grad,
        ..ModelConfig::new(64, 32, 2, 2)
    }
}

fn micro_batch(c: &mut Criterion) {
    let tokens = encode(synthetic_corpus(1 << 16, 1).as_bytes());
    let ds = SequenceDataset::split(&tokens, 64, 0.0).unwrap();
    let (inputs, targets) = inputs_and_targets(&ds.train[..16]);
    let state = ModelState::init(&desk(GradConfig::standard()), 0).unwrap();

    let mut g = c.benchmark_group("desk_micro_batch_16");
    g.sample_size(20);
    g.bench_function("forward", |b| {
        let cfg = desk(GradConfig::standard());
        b.iter(|| model_forward(&state, &inputs, &cfg, Dropout::Seeded(1)).unwrap())
    });
    for (name, grad) in [
        ("loss_and_grads_standard", GradConfig::standard()),
        (
            "loss_and_grads_score_1000",
            GradConfig::score(ScaleConfig::new([1.0, 0.0, 0.0, 0.0]).unwrap()),
        ),
    ] {
        let cfg = desk(grad);
        g.bench_function(name, |b| {
            b.iter(|| loss_and_grads(&state, &inputs, &targets, &cfg, Dropout::Seeded(1)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, micro_batch);
criterion_main!(benches);
