//! Finite-difference checks of every gradient variant against the naive
//! reference implementation in `common`.

mod common;

use common::*;
use spangrad::grad::{
    block_gradients, grad_k_by_order, grad_q_by_order, grad_reductionistic, grad_simplest,
    grad_standard, grad_unidirectional, grad_v, reductionistic_projectors, routed_block_gradients,
    BlockGradMode, SimplestScales, CROSS_PAIRS,
};
use spangrad::linalg::{projector, projector_with_pinv, RegularizationPolicy, SpanSource};
use spangrad::scores::{decompose_bidirectional, BLOCKS_BY_ORDER};
use spangrad::Matrix;

const H: f64 = 1e-5;

fn exact() -> RegularizationPolicy {
    RegularizationPolicy::exact()
}

struct Instance {
    q: M,
    k: M,
    v: M,
    g: [M; 8],
}

fn instance(seed: u64, t: usize, d: usize) -> Instance {
    let mut r = rng(seed);
    Instance {
        q: randn(&mut r, t, d),
        k: randn(&mut r, t, d),
        v: randn(&mut r, t, d),
        g: std::array::from_fn(|_| randn(&mut r, t, t)),
    }
}

#[test]
fn standard_matches_finite_differences() {
    let x = instance(1, 8, 4);
    let g = &x.g[0];
    let c = 1.0 / 2.0;
    let (dq, dk) = grad_standard(&g.view(), &x.q.view(), &x.k.view()).unwrap();
    let fq = fd_grad(&x.q, H, |q| inner(g, &scale(&mm(q, &tr(&x.k)), c)));
    let fk = fd_grad(&x.k, H, |k| inner(g, &scale(&mm(&x.q, &tr(k)), c)));
    assert!(rel_err(&dq, &fq) <= 1e-7, "{}", rel_err(&dq, &fq));
    assert!(rel_err(&dk, &fk) <= 1e-7, "{}", rel_err(&dk, &fk));
}

#[test]
fn value_gradient_matches_finite_differences() {
    let x = instance(2, 8, 4);
    let s = scale(&mm(&x.q, &tr(&x.k)), 0.5);
    let a = softmax_rows(&s);
    let up = randn(&mut rng(22), 8, 4);
    let dv = grad_v(&a.view(), &up.view()).unwrap();
    let fv = fd_grad(&x.v, H, |v| inner(&up, &mm(&softmax_rows(&s), v)));
    assert!(rel_err(&dv, &fv) <= 1e-7, "{}", rel_err(&dv, &fv));
}

fn unidirectional_loss(q: &M, k: &M, gp: &M, go: &M) -> f64 {
    let c = 1.0 / (q.ncols() as f64).sqrt();
    let qk = scale(&mm(q, &tr(k)), c);
    let p = proj(k);
    inner(gp, &mm(&p, &qk)) + inner(go, &mm(&perp(&p), &qk))
}

#[test]
fn unidirectional_matches_finite_differences() {
    for (seed, t, d) in [(3, 8, 2), (4, 12, 3), (5, 16, 4)] {
        let x = instance(seed, t, d);
        let (gp, go) = (&x.g[0], &x.g[1]);
        let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
        let (dq, dk) =
            grad_unidirectional(&gp.view(), &go.view(), &x.q.view(), &x.k.view(), &pk, &kp)
                .unwrap();
        let fq = fd_grad(&x.q, H, |q| unidirectional_loss(q, &x.k, gp, go));
        let fk = fd_grad(&x.k, H, |k| unidirectional_loss(&x.q, k, gp, go));
        assert!(
            rel_err(&dq, &fq) <= 1e-6,
            "dQ T={t} d={d}: {}",
            rel_err(&dq, &fq)
        );
        assert!(
            rel_err(&dk, &fk) <= 1e-6,
            "dK T={t} d={d}: {}",
            rel_err(&dk, &fk)
        );
    }
}

#[test]
fn unidirectional_axis_key_parallel_only() {
    // K = e1, only the parallel half carries gradient.
    let t = 4;
    let mut k = M::zeros((t, 1));
    k[[0, 0]] = 1.0;
    let mut r = rng(6);
    let q = randn(&mut r, t, 1);
    let g = randn(&mut r, t, t);
    let z = M::zeros((t, t));
    let (pk, kp) = projector_with_pinv(&k.view(), &exact(), SpanSource::K).unwrap();
    let (dq, dk) =
        grad_unidirectional(&g.view(), &z.view(), &q.view(), &k.view(), &pk, &kp).unwrap();
    let fq = fd_grad(&q, H, |q| unidirectional_loss(q, &k, &g, &z));
    let fk = fd_grad(&k, H, |k| unidirectional_loss(&q, k, &g, &z));
    assert!(rel_err(&dq, &fq) <= 1e-6);
    assert!(rel_err(&dk, &fk) <= 1e-6, "{}", rel_err(&dk, &fk));
}

fn surrogate(blocks: &[usize], g: &[M; 8], q: &M, k: &M, v: &M) -> f64 {
    blocks
        .iter()
        .map(|&b| inner(&g[b - 1], &block(b, q, k, v)))
        .sum()
}

#[test]
fn q_gradient_by_order_matches_finite_differences() {
    for (seed, t, d) in [(7, 8, 2), (8, 16, 4)] {
        let x = instance(seed, t, d);
        let pk = projector(&x.k.view(), &exact(), SpanSource::K).unwrap();
        let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
        let orders = grad_q_by_order(&x.g, &pk, &pv, &x.k.view()).unwrap();
        for (order, blocks) in BLOCKS_BY_ORDER.iter().enumerate() {
            let f = fd_grad(&x.q, H, |q| surrogate(blocks, &x.g, q, &x.k, &x.v));
            let e = rel_err(&orders[order], &f);
            assert!(e <= 1e-6, "order {order} T={t}: {e}");
        }
    }
}

#[test]
fn k_gradient_total_matches_finite_differences() {
    for (seed, t, d) in [(9, 8, 2), (10, 16, 4)] {
        let x = instance(seed, t, d);
        let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
        let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
        let (direct, cross) =
            grad_k_by_order(&x.g, &x.q.view(), &x.k.view(), &pk, &pv, &kp).unwrap();
        assert!(cross[0].iter().all(|&v| v == 0.0));
        let mut total = M::zeros(x.k.dim());
        for i in 0..4 {
            total = add(&add(&total, &direct[i]), &cross[i]);
        }
        let all: Vec<usize> = (1..=8).collect();
        let f = fd_grad(&x.k, H, |k| surrogate(&all, &x.g, &x.q, k, &x.v));
        assert!(
            rel_err(&total, &f) <= 1e-6,
            "T={t}: {}",
            rel_err(&total, &f)
        );
    }
}

#[test]
fn k_gradient_components_match_finite_differences() {
    let x = instance(11, 12, 3);
    let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let (direct, cross) = grad_k_by_order(&x.g, &x.q.view(), &x.k.view(), &pk, &pv, &kp).unwrap();

    // Direct terms: projectors frozen at K, only the explicit K^T moves.
    for (order, blocks) in BLOCKS_BY_ORDER.iter().enumerate() {
        let f = fd_grad(&x.k, H, |k| {
            blocks
                .iter()
                .map(|&b| inner(&x.g[b - 1], &block_split(b, &x.q, &x.k, k, &x.v)))
                .sum()
        });
        let e = rel_err(&direct[order], &f);
        assert!(e <= 1e-6, "direct order {order}: {e}");
    }

    // Cross terms: only the left Π_K moves; booked by the block pairing.
    for (order, analytic) in cross.iter().enumerate().skip(1) {
        let blocks: Vec<usize> = CROSS_PAIRS
            .iter()
            .filter(|p| p.2 == order)
            .flat_map(|p| [p.0, p.1])
            .collect();
        let f = fd_grad(&x.k, H, |k| {
            blocks
                .iter()
                .map(|&b| inner(&x.g[b - 1], &block_split(b, &x.q, k, &x.k, &x.v)))
                .sum()
        });
        let e = rel_err(analytic, &f);
        assert!(e <= 1e-6, "cross order {order}: {e}");
    }
}

#[test]
fn first_block_alone_exercises_projector_derivative() {
    let x = instance(12, 4, 2);
    let g1 = x.g[0].clone();
    let grads: [M; 8] = std::array::from_fn(|i| if i == 0 { g1.clone() } else { M::zeros((4, 4)) });
    let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let (direct, cross) = grad_k_by_order(&grads, &x.q.view(), &x.k.view(), &pk, &pv, &kp).unwrap();
    let analytic = add(&direct[0], &cross[1]);
    for i in [1, 2, 3] {
        assert!(norm(&direct[i]) == 0.0);
    }
    assert!(norm(&cross[2]) == 0.0 && norm(&cross[3]) == 0.0);
    assert!(norm(&cross[1]) > 1e-3, "projector path must contribute");
    let f = fd_grad(&x.k, H, |k| inner(&g1, &block(1, &x.q, k, &x.v)));
    assert!(rel_err(&analytic, &f) <= 1e-6, "{}", rel_err(&analytic, &f));
}

#[test]
fn routed_grads_sum_to_standard_and_cancel_cross_terms() {
    let x = instance(13, 16, 4);
    let g = &x.g[0];
    let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let routed = routed_block_gradients(&g.view());
    let q_orders = grad_q_by_order(&routed, &pk, &pv, &x.k.view()).unwrap();
    let (direct, cross) =
        grad_k_by_order(&routed, &x.q.view(), &x.k.view(), &pk, &pv, &kp).unwrap();
    let (sq, sk) = grad_standard(&g.view(), &x.q.view(), &x.k.view()).unwrap();
    let dq = q_orders.iter().fold(M::zeros(sq.dim()), |a, b| add(&a, b));
    let dk = direct.iter().fold(M::zeros(sk.dim()), |a, b| add(&a, b));
    assert!(rel_err(&dq, &sq) <= 1e-12);
    assert!(rel_err(&dk, &sk) <= 1e-12);
    for c in &cross {
        assert!(norm(c) <= 1e-12 * norm(&sk));
    }
}

#[test]
fn q_and_k_terms_vanish_for_zero_queries() {
    let x = instance(14, 8, 2);
    let z = M::zeros(x.q.dim());
    let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let (direct, cross) = grad_k_by_order(&x.g, &z.view(), &x.k.view(), &pk, &pv, &kp).unwrap();
    assert!(direct.iter().chain(cross.iter()).all(|m| norm(m) == 0.0));
}

#[test]
fn full_spans_put_everything_in_order_zero() {
    // T = d with full-rank K and V: both complements vanish.
    let x = instance(15, 4, 4);
    let pk = projector(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let orders = grad_q_by_order(&x.g, &pk, &pv, &x.k.view()).unwrap();
    let expect = scale(&mm(&x.g[0], &x.k), 0.5);
    assert!(rel_err(&orders[0], &expect) <= 1e-10);
    for o in &orders[1..] {
        assert!(norm(o) <= 1e-10 * norm(&expect));
    }
}

#[test]
fn simplest_and_reductionistic_project_the_finite_difference_gradient() {
    let x = instance(16, 16, 4);
    let g = &x.g[0];
    let c = 0.5;
    let fq = fd_grad(&x.q, H, |q| inner(g, &scale(&mm(q, &tr(&x.k)), c)));
    let fk = fd_grad(&x.k, H, |k| inner(g, &scale(&mm(&x.q, &tr(k)), c)));
    let pk_ref = proj(&x.k);
    let pv_ref = proj(&x.v);

    let pk = projector(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let scales = SimplestScales::new(0.7, 0.2).unwrap();
    let (dq, dk) = grad_simplest(&g.view(), &x.q.view(), &x.k.view(), &pk, &scales).unwrap();
    let p = add(&scale(&pk_ref, 0.7), &scale(&perp(&pk_ref), 0.2));
    assert!(rel_err(&dq, &mm(&p, &fq)) <= 1e-6);
    assert!(rel_err(&dk, &mm(&p, &fk)) <= 1e-6);

    let alpha = [1.0, 0.5, 0.25, 2.0];
    let projs = reductionistic_projectors(&pk, &pv).unwrap();
    let (dq, dk) = grad_reductionistic(
        &g.view(),
        &x.q.view(),
        &x.k.view(),
        &projs,
        &spangrad::grad::ScaleConfig::new(alpha).unwrap(),
    )
    .unwrap();
    let sandwich = |o: &M, i: &M| mm(&mm(o, i), o);
    let refs = [
        sandwich(&pk_ref, &pv_ref),
        sandwich(&pk_ref, &perp(&pv_ref)),
        sandwich(&perp(&pk_ref), &pv_ref),
        sandwich(&perp(&pk_ref), &perp(&pv_ref)),
    ];
    let mut p = M::zeros((16, 16));
    for (r, a) in refs.iter().zip(alpha) {
        p = add(&p, &scale(r, a));
    }
    assert!(rel_err(&dq, &mm(&p, &fq)) <= 1e-6);
    assert!(rel_err(&dk, &mm(&p, &fk)) <= 1e-6);

    let half = spangrad::grad::ScaleConfig::new([1.0, 1.0, 0.0, 0.0]).unwrap();
    let (dq, _) = grad_reductionistic(&g.view(), &x.q.view(), &x.k.view(), &projs, &half).unwrap();
    assert!(rel_err(&dq, &mm(&pk_ref, &scale(&mm(g, &x.k), c))) <= 1e-10);
}

fn masked_softmax_attention(s: &M, v: &M, causal: bool) -> M {
    let mut s = s.clone();
    if causal {
        for i in 0..s.nrows() {
            for j in (i + 1)..s.ncols() {
                s[[i, j]] = -1e9;
            }
        }
    }
    mm(&softmax_rows(&s), v)
}

#[test]
fn per_block_softmax_gradients() {
    let x = instance(17, 6, 2);
    let t = 6;
    let s = scale(&mm(&x.q, &tr(&x.k)), 1.0 / 2f64.sqrt());
    let up = randn(&mut rng(170), t, 2);
    let mut blocks = decompose_bidirectional(
        &x.q.view(),
        &x.k.view(),
        &projector(&x.k.view(), &exact(), SpanSource::K).unwrap(),
        &projector(&x.v.view(), &exact(), SpanSource::V).unwrap(),
    )
    .unwrap();
    // One block carries the full score, the rest are zero.
    blocks.blocks = std::array::from_fn(|i| {
        if i == 0 {
            s.clone()
        } else {
            Matrix::zeros((t, t))
        }
    });
    for causal in [false, true] {
        let grads = block_gradients(
            &blocks,
            &s.view(),
            &x.v.view(),
            &up.view(),
            BlockGradMode::PerBlockSoftmax,
            causal,
        )
        .unwrap();
        let f = fd_grad(&s, H, |s| {
            inner(&up, &masked_softmax_attention(s, &x.v, causal))
        });
        assert!(rel_err(&grads[0], &f) <= 1e-7, "{}", rel_err(&grads[0], &f));
        let z = M::zeros((t, t));
        let fz = fd_grad(&z, H, |s| {
            inner(&up, &masked_softmax_attention(s, &x.v, causal))
        });
        for g in &grads[1..] {
            assert!(rel_err(g, &fz) <= 1e-7);
        }
    }

    let zero_v = M::zeros((t, 2));
    let grads = block_gradients(
        &blocks,
        &s.view(),
        &zero_v.view(),
        &up.view(),
        BlockGradMode::PerBlockSoftmax,
        true,
    )
    .unwrap();
    assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));

    let grads = block_gradients(
        &blocks,
        &s.view(),
        &x.v.view(),
        &up.view(),
        BlockGradMode::Routed,
        true,
    )
    .unwrap();
    assert!(grads.iter().all(|g| *g == s));
}

#[test]
fn routed_fast_path_matches_weighted_block_surrogate() {
    use spangrad::grad::{grad_score_routed, ScaleConfig};
    use spangrad::linalg::pseudoinverse_matrix;
    for (seed, t, d, alpha) in [
        (31, 10, 3, [1.0, 0.0, 0.0, 0.0]),
        (32, 12, 4, [0.7, 1.3, 0.2, 2.0]),
        (33, 9, 2, [0.0, 0.0, 1.0, 1.0]),
    ] {
        let x = instance(seed, t, d);
        let g = &x.g[0];
        let kp = pseudoinverse_matrix(&x.k.view(), &exact()).unwrap();
        let vp = pseudoinverse_matrix(&x.v.view(), &exact()).unwrap();
        let scales = ScaleConfig::new(alpha).unwrap();
        let (dq, dk) = grad_score_routed(
            &g.view(),
            &x.q.view(),
            &x.k.view(),
            &x.v.view(),
            &kp,
            &vp,
            &scales,
        )
        .unwrap();
        let weighted = |q: &M, k_left: &M, k_right: &M| -> f64 {
            (1..=8)
                .map(|b| alpha[ORDER[b - 1]] * inner(g, &block_split(b, q, k_left, k_right, &x.v)))
                .sum()
        };
        let fq = fd_grad(&x.q, H, |q| weighted(q, &x.k, &x.k));
        // Equal block gradients cancel the cross terms, leaving the explicit-K path.
        let fk = fd_grad(&x.k, H, |k| weighted(&x.q, &x.k, k));
        assert!(
            rel_err(&dq, &fq) <= 1e-6,
            "dQ seed {seed}: {}",
            rel_err(&dq, &fq)
        );
        assert!(
            rel_err(&dk, &fk) <= 1e-6,
            "dK seed {seed}: {}",
            rel_err(&dk, &fk)
        );
    }
}

#[test]
fn routed_fast_path_agrees_with_block_pipeline() {
    use spangrad::grad::{grad_score_routed, score_decomposition_grads, ScaleConfig};
    use spangrad::linalg::pseudoinverse_matrix;
    let x = instance(41, 16, 4);
    let g = &x.g[2];
    let (pk, kp) = projector_with_pinv(&x.k.view(), &exact(), SpanSource::K).unwrap();
    let pv = projector(&x.v.view(), &exact(), SpanSource::V).unwrap();
    let vp = pseudoinverse_matrix(&x.v.view(), &exact()).unwrap();
    for alpha in [
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
        [0.3, 2.0, 0.5, 1.5],
    ] {
        let scales = ScaleConfig::new(alpha).unwrap();
        let bundle = score_decomposition_grads(
            &routed_block_gradients(&g.view()),
            &x.q.view(),
            &x.k.view(),
            &pk,
            &pv,
            &kp,
            Matrix::zeros(x.v.dim()),
            &scales,
        )
        .unwrap();
        let (dq, dk) = grad_score_routed(
            &g.view(),
            &x.q.view(),
            &x.k.view(),
            &x.v.view(),
            &kp.matrix,
            &vp,
            &scales,
        )
        .unwrap();
        assert!(rel_err(&dq, &bundle.scaled_dq) <= 1e-12);
        assert!(rel_err(&dk, &bundle.scaled_dk) <= 1e-12);
    }
}
