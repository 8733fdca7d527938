//! Independent reference implementations for the integration tests.
//!
//! Everything here uses plain nested loops and Gauss-Jordan elimination so
//! that it shares no code path with the library it checks.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type M = Array2<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> M {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn mm(a: &M, b: &M) -> M {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = M::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

pub fn tr(a: &M) -> M {
    let mut out = M::zeros((a.ncols(), a.nrows()));
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[[j, i]] = a[[i, j]];
        }
    }
    out
}

pub fn eye(n: usize) -> M {
    let mut out = M::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = 1.0;
    }
    out
}

pub fn sub(a: &M, b: &M) -> M {
    let mut out = a.clone();
    for (o, v) in out.iter_mut().zip(b.iter()) {
        *o -= v;
    }
    out
}

pub fn add(a: &M, b: &M) -> M {
    let mut out = a.clone();
    for (o, v) in out.iter_mut().zip(b.iter()) {
        *o += v;
    }
    out
}

pub fn scale(a: &M, c: f64) -> M {
    a.mapv(|v| v * c)
}

pub fn inner(a: &M, b: &M) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &M) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(a: &M, b: &M) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &M, b: &M) -> f64 {
    let denom = norm(a).max(norm(b));
    if denom == 0.0 {
        0.0
    } else {
        dist(a, b) / denom
    }
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &M) -> M {
    let n = a.nrows();
    let mut w = a.clone();
    let mut inv = eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| w[[i, col]].abs().partial_cmp(&w[[j, col]].abs()).unwrap())
            .unwrap();
        for j in 0..n {
            w.swap([col, j], [pivot, j]);
            inv.swap([col, j], [pivot, j]);
        }
        let p = w[[col, col]];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        for j in 0..n {
            w[[col, j]] /= p;
            inv[[col, j]] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = w[[i, col]];
                if f != 0.0 {
                    for j in 0..n {
                        w[[i, j]] -= f * w[[col, j]];
                        inv[[i, j]] -= f * inv[[col, j]];
                    }
                }
            }
        }
    }
    inv
}

/// `M (M^T M)^{-1} M^T`.
pub fn proj(m: &M) -> M {
    let g = mm(&tr(m), m);
    mm(&mm(m, &inverse(&g)), &tr(m))
}

pub fn perp(p: &M) -> M {
    sub(&eye(p.nrows()), p)
}

/// `(M^T M)^{-1} M^T`.
pub fn pinv(m: &M) -> M {
    mm(&inverse(&mm(&tr(m), m)), &tr(m))
}

/// Factors `(left_v, left_k, right_v)` of blocks 1..=8, `true` = parallel.
pub const FACTORS: [(bool, bool, bool); 8] = [
    (true, true, true),
    (true, true, false),
    (true, false, true),
    (true, false, false),
    (false, true, true),
    (false, true, false),
    (false, false, true),
    (false, false, false),
];

pub const ORDER: [usize; 8] = [0, 1, 1, 2, 1, 2, 2, 3];

fn pick(p: &M, parallel: bool) -> M {
    if parallel {
        p.clone()
    } else {
        perp(p)
    }
}

/// `S^B` with the left `Π_K` evaluated at `k_left`, the explicit `K^T Π_K`
/// evaluated at `k_right` and `Π_V` from `v`.
pub fn block_split(b: usize, q: &M, k_left: &M, k_right: &M, v: &M) -> M {
    let (lv, lk, rv) = FACTORS[b - 1];
    let pk_left = proj(k_left);
    let pk_right = proj(k_right);
    let pv = proj(v);
    let c = 1.0 / (q.ncols() as f64).sqrt();
    let left = mm(&pick(&pv, lv), &pick(&pk_left, lk));
    let right = mm(&mm(&tr(k_right), &pk_right), &pick(&pv, rv));
    scale(&mm(&mm(&left, q), &right), c)
}

/// `S^B(Q, K)` with every projector recomputed from its arguments.
pub fn block(b: usize, q: &M, k: &M, v: &M) -> M {
    block_split(b, q, k, k, v)
}

/// Central difference gradient of `f` with respect to every entry of `x`.
pub fn fd_grad(x: &M, h: f64, mut f: impl FnMut(&M) -> f64) -> M {
    let mut out = M::zeros(x.dim());
    let mut xp = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = xp[[i, j]];
            xp[[i, j]] = orig + h;
            let fp = f(&xp);
            xp[[i, j]] = orig - h;
            let fm = f(&xp);
            xp[[i, j]] = orig;
            out[[i, j]] = (fp - fm) / (2.0 * h);
        }
    }
    out
}

pub fn softmax_rows(s: &M) -> M {
    let mut out = s.clone();
    for i in 0..s.nrows() {
        let max = (0..s.ncols())
            .map(|j| s[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..s.ncols() {
            out[[i, j]] = (s[[i, j]] - max).exp();
            sum += out[[i, j]];
        }
        for j in 0..s.ncols() {
            out[[i, j]] /= sum;
        }
    }
    out
}
