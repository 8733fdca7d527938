mod common;

use common::{randn, rel_err, rng};
use proptest::prelude::*;
use spangrad::attention::{attention_backward, attention_forward, GradConfig};
use spangrad::audit::projector_checks;
use spangrad::data::{decode, encode};
use spangrad::grad::{grad_score_routed, grad_standard, ScaleConfig};
use spangrad::linalg::{projector, pseudoinverse_matrix, RegularizationPolicy, SpanSource};
use spangrad::scores::{decompose_bidirectional, score};

fn sizes() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=8, 0usize..=24, any::<u64>()).prop_map(|(d, extra, seed)| (d + extra, d, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_invariants_hold((t, d, seed) in sizes()) {
        let k = randn(&mut rng(seed), t, d);
        let (checks, _) = projector_checks(&k, "", None).unwrap();
        for c in checks {
            prop_assert!(c.pass, "{} = {:e}", c.id, c.measured);
        }
    }

    #[test]
    fn blocks_sum_to_the_score((t, d, seed) in sizes()) {
        let mut r = rng(seed);
        let (q, k, v) = (randn(&mut r, t, d), randn(&mut r, t, d), randn(&mut r, t, d));
        let exact = RegularizationPolicy::exact();
        let pk = projector(&k.view(), &exact, SpanSource::K).unwrap();
        let pv = projector(&v.view(), &exact, SpanSource::V).unwrap();
        let blocks = decompose_bidirectional(&q.view(), &k.view(), &pk, &pv).unwrap();
        let s = score(&q.view(), &k.view()).unwrap();
        prop_assert!(rel_err(&blocks.sum(), &s) <= 1e-10);
    }

    #[test]
    fn unit_scales_reconstruct_standard((t, d, seed) in sizes()) {
        let mut r = rng(seed);
        let (q, k, v) = (randn(&mut r, t, d), randn(&mut r, t, d), randn(&mut r, t, d));
        let g = randn(&mut r, t, t);
        let policy = RegularizationPolicy::training();
        let kp = pseudoinverse_matrix(&k.view(), &policy).unwrap();
        let vp = pseudoinverse_matrix(&v.view(), &policy).unwrap();
        let (dq, dk) = grad_score_routed(
            &g.view(), &q.view(), &k.view(), &v.view(), &kp, &vp, &ScaleConfig::UNIT,
        ).unwrap();
        let (sq, sk) = grad_standard(&g.view(), &q.view(), &k.view()).unwrap();
        prop_assert!(rel_err(&dq, &sq) <= 1e-9);
        prop_assert!(rel_err(&dk, &sk) <= 1e-9);
    }

    #[test]
    fn gradients_are_homogeneous_in_the_scales(
        (t, d, seed) in sizes(),
        alpha in prop::array::uniform4(0.0f64..3.0),
        c in 0.1f64..10.0,
    ) {
        let mut r = rng(seed);
        let (q, k, v) = (randn(&mut r, t, d), randn(&mut r, t, d), randn(&mut r, t, d));
        let g = randn(&mut r, t, t);
        let policy = RegularizationPolicy::training();
        let kp = pseudoinverse_matrix(&k.view(), &policy).unwrap();
        let vp = pseudoinverse_matrix(&v.view(), &policy).unwrap();
        let run = |s: &ScaleConfig| grad_score_routed(
            &g.view(), &q.view(), &k.view(), &v.view(), &kp, &vp, s,
        ).unwrap();
        let base = ScaleConfig::new(alpha).unwrap();
        let (dq, dk) = run(&base);
        let (cq, ck) = run(&base.scaled_by(c).unwrap());
        prop_assert!(rel_err(&cq, &(&dq * c)) <= 1e-10);
        prop_assert!(rel_err(&ck, &(&dk * c)) <= 1e-10);
    }

    #[test]
    fn value_gradient_ignores_the_method(
        (t, d, seed) in sizes(),
        alpha in prop::array::uniform4(0.0f64..3.0),
    ) {
        let mut r = rng(seed);
        let (q, k, v) = (randn(&mut r, t, d), randn(&mut r, t, d), randn(&mut r, t, d));
        let up = randn(&mut r, t, d);
        let fwd = attention_forward(&q.view(), &k.view(), &v.view(), true).unwrap();
        let back = |cfg: &GradConfig| attention_backward(
            &q.view(), &k.view(), &v.view(), &fwd.weights.view(), &up.view(), cfg, true,
        ).unwrap();
        let (_, _, dv_std) = back(&GradConfig::standard());
        let (_, _, dv) = back(&GradConfig::score(ScaleConfig::new(alpha).unwrap()));
        prop_assert_eq!(dv, dv_std);
    }

    #[test]
    fn bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        prop_assert_eq!(decode(&encode(&bytes)).unwrap(), bytes);
    }
}
