use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spangrad::attention::{attention_backward, attention_forward, GradConfig};
use spangrad::grad::{grad_score_routed, grad_standard, BlockGradMode, ScaleConfig};
use spangrad::linalg::{projector, pseudoinverse_matrix, RegularizationPolicy, SpanSource};
use spangrad::scores::decompose_bidirectional;
use spangrad_bench::{attention_inputs, score_gradient};
use std::hint::black_box;

const SIZES: [(usize, usize); 3] = [(16, 4), (64, 16), (128, 32)];

fn projectors(c: &mut Criterion) {
    let mut g = c.benchmark_group("projector");
    let policy = RegularizationPolicy::training();
    for (t, d) in SIZES {
        let (_, k, _, _) = attention_inputs(1, t, d);
        g.bench_with_input(
            BenchmarkId::new("explicit", format!("{t}x{d}")),
            &k,
            |b, k| b.iter(|| projector(&k.view(), &policy, SpanSource::K).unwrap()),
        );
        g.bench_with_input(BenchmarkId::new("pinv", format!("{t}x{d}")), &k, |b, k| {
            b.iter(|| pseudoinverse_matrix(&k.view(), &policy).unwrap())
        });
    }
    g.finish();
}

fn decomposition(c: &mut Criterion) {
    let mut g = c.benchmark_group("decompose_bidirectional");
    let policy = RegularizationPolicy::exact();
    for (t, d) in SIZES {
        let (q, k, v, _) = attention_inputs(2, t, d);
        let pk = projector(&k.view(), &policy, SpanSource::K).unwrap();
        let pv = projector(&v.view(), &policy, SpanSource::V).unwrap();
        g.bench_function(format!("{t}x{d}"), |b| {
            b.iter(|| decompose_bidirectional(&q.view(), &k.view(), &pk, &pv).unwrap())
        });
    }
    g.finish();
}

fn score_gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("score_gradient");
    let policy = RegularizationPolicy::training();
    let scales = ScaleConfig::new([1.0, 0.5, 0.25, 0.0]).unwrap();
    for (t, d) in SIZES {
        let (q, k, v, _) = attention_inputs(3, t, d);
        let ds = score_gradient(4, t);
        let id = format!("{t}x{d}");
        g.bench_function(BenchmarkId::new("standard", &id), |b| {
            b.iter(|| grad_standard(&ds.view(), &q.view(), &k.view()).unwrap())
        });
        g.bench_function(BenchmarkId::new("routed_factored", &id), |b| {
            b.iter(|| {
                let kp = pseudoinverse_matrix(&k.view(), &policy).unwrap();
                let vp = pseudoinverse_matrix(&v.view(), &policy).unwrap();
                grad_score_routed(
                    &ds.view(),
                    &q.view(),
                    &k.view(),
                    &v.view(),
                    &kp,
                    &vp,
                    &scales,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_backward");
    let (t, d) = (64, 16);
    let (q, k, v, up) = attention_inputs(5, t, d);
    let fwd = attention_forward(&q.view(), &k.view(), &v.view(), true).unwrap();
    let scales = ScaleConfig::new([1.0, 1.0, 0.0, 0.0]).unwrap();
    let configs = [
        ("standard", GradConfig::standard()),
        ("score_routed", GradConfig::score(scales)),
        (
            "score_per_block",
            GradConfig {
                block_mode: BlockGradMode::PerBlockSoftmax,
                ..GradConfig::score(scales)
            },
        ),
    ];
    for (name, cfg) in configs {
        g.bench_function(name, |b| {
            b.iter(|| {
                attention_backward(
                    &q.view(),
                    &k.view(),
                    &v.view(),
                    &fwd.weights.view(),
                    black_box(&up.view()),
                    &cfg,
                    true,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    projectors,
    decomposition,
    score_gradients,
    attention
);
criterion_main!(benches);
