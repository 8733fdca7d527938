//! Backward-pass variants for the attention score product.
//!
//! Every function here takes the upstream gradient with respect to the score
//! matrix `S = QK^T / √d` (or per-block gradients `∂L/∂S^B`) and returns
//! gradients for `Q` and `K`. Matrix chains are ordered so that each product
//! lands in a thin `T x d` matrix; nothing here is cubic in `T` except
//! [`reductionistic_projectors`].

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::attention::{apply_causal_mask, softmax_backward, softmax_rows};
use crate::error::{mismatch, same_shape, Error, Result};
use crate::linalg::{Matrix, ProjectorPair, Pseudoinverse};
use crate::scores::{ScoreBlocks, BLOCK_FACTORS, NUM_BLOCKS, NUM_ORDERS};

/// Order-wise scale factors `[α0, α1, α2, α3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub alpha: [f64; NUM_ORDERS],
}

impl ScaleConfig {
    pub const UNIT: Self = Self { alpha: [1.0; 4] };
    pub const ZERO: Self = Self { alpha: [0.0; 4] };

    pub fn new(alpha: [f64; NUM_ORDERS]) -> Result<Self> {
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "scale factors must be finite and non-negative, got {alpha:?}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn scaled_by(&self, c: f64) -> Result<Self> {
        Self::new(self.alpha.map(|a| a * c))
    }
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self::UNIT
    }
}

/// Accepts `1,0,0,0`, `[1,0,0,0]` or the compact binary form `1000`.
impl FromStr for ScaleConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().trim_start_matches('[').trim_end_matches(']');
        let parts: Vec<&str> = if body.contains(',') {
            body.split(',').map(str::trim).collect()
        } else {
            body.split("").filter(|p| !p.is_empty()).collect()
        };
        if parts.len() != NUM_ORDERS {
            return Err(Error::InvalidConfig(format!(
                "expected four scale factors, got `{s}`"
            )));
        }
        let mut alpha = [0.0; NUM_ORDERS];
        for (a, p) in alpha.iter_mut().zip(&parts) {
            *a = p
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad scale factor `{p}` in `{s}`")))?;
        }
        Self::new(alpha)
    }
}

impl fmt::Display for ScaleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.alpha.iter().all(|a| *a == 0.0 || *a == 1.0) {
            write!(f, "[")?;
            for a in &self.alpha {
                write!(f, "{}", *a as u8)?;
            }
            write!(f, "]")
        } else {
            let parts: Vec<String> = self.alpha.iter().map(|a| a.to_string()).collect();
            write!(f, "[{}]", parts.join(","))
        }
    }
}

/// Binary on/off switches for the Q, K and V gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QKVModulation {
    pub alpha_q: bool,
    pub alpha_k: bool,
    pub alpha_v: bool,
}

impl QKVModulation {
    pub const ALL: Self = Self {
        alpha_q: true,
        alpha_k: true,
        alpha_v: true,
    };
    pub const V_ONLY: Self = Self {
        alpha_q: false,
        alpha_k: false,
        alpha_v: true,
    };
}

impl Default for QKVModulation {
    fn default() -> Self {
        Self::ALL
    }
}

/// Accepts `QKV001` or `001`.
impl FromStr for QKVModulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s.trim().trim_start_matches("QKV").trim_start_matches("qkv");
        let b: Vec<char> = bits.chars().collect();
        if b.len() != 3 || b.iter().any(|c| *c != '0' && *c != '1') {
            return Err(Error::InvalidConfig(format!("bad QKV modulation `{s}`")));
        }
        Ok(Self {
            alpha_q: b[0] == '1',
            alpha_k: b[1] == '1',
            alpha_v: b[2] == '1',
        })
    }
}

impl fmt::Display for QKVModulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "QKV{}{}{}",
            self.alpha_q as u8, self.alpha_k as u8, self.alpha_v as u8
        )
    }
}

/// `α∥` and `α⊥` of the single-projector framework.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplestScales {
    pub alpha_parallel: f64,
    pub alpha_orthogonal: f64,
}

impl SimplestScales {
    pub fn new(alpha_parallel: f64, alpha_orthogonal: f64) -> Result<Self> {
        for a in [alpha_parallel, alpha_orthogonal] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "scale {a} must be non-negative"
                )));
            }
        }
        Ok(Self {
            alpha_parallel,
            alpha_orthogonal,
        })
    }
}

impl Default for SimplestScales {
    fn default() -> Self {
        Self {
            alpha_parallel: 1.0,
            alpha_orthogonal: 1.0,
        }
    }
}

/// How `∂L/∂S^B` is obtained from the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockGradMode {
    /// Every block receives the full `∂L/∂S`.
    #[default]
    Routed,
    /// `∂L/∂S^B` through `softmax(S^B) V` for each block separately.
    #[serde(alias = "per_block", alias = "perblock")]
    PerBlockSoftmax,
}

impl FromStr for BlockGradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "routed" => Ok(Self::Routed),
            "perblock" | "per_block" | "per_block_softmax" => Ok(Self::PerBlockSoftmax),
            _ => Err(Error::InvalidConfig(format!(
                "unknown block gradient mode `{s}`"
            ))),
        }
    }
}

/// Per-order Q/K gradient pieces of the 8-block decomposition.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub dq_by_order: [Matrix; NUM_ORDERS],
    pub dk_by_order_direct: [Matrix; NUM_ORDERS],
    /// `dk_by_order_cross[0]` is identically zero.
    pub dk_by_order_cross: [Matrix; NUM_ORDERS],
    pub dv: Matrix,
    pub scaled_dq: Matrix,
    pub scaled_dk: Matrix,
}

fn inv_sqrt_d(q: &ArrayView2<f64>) -> f64 {
    1.0 / (q.ncols() as f64).sqrt()
}

fn check_qk_ds(
    op: &'static str,
    ds: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
) -> Result<()> {
    same_shape(op, q.dim(), k.dim())?;
    same_shape(op, ds.dim(), (q.nrows(), q.nrows()))
}

fn check_projector(op: &'static str, p: &ProjectorPair, t: usize) -> Result<()> {
    if p.dim() == t {
        Ok(())
    } else {
        Err(mismatch(
            op,
            format!("projector is {0}x{0}, sequence length {t}", p.dim()),
        ))
    }
}

fn check_pinv(op: &'static str, kplus: &Pseudoinverse, k: &ArrayView2<f64>) -> Result<()> {
    same_shape(op, kplus.matrix.dim(), (k.ncols(), k.nrows()))
}

/// Textbook `dQ = dS K / √d`, `dK = dS^T Q / √d`.
pub fn grad_standard(
    ds: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
) -> Result<(Matrix, Matrix)> {
    check_qk_ds("grad_standard", ds, q, k)?;
    let c = inv_sqrt_d(q);
    Ok((ds.dot(k) * c, ds.t().dot(q) * c))
}

/// `dV = A^T dAttn`.
pub fn grad_v(attn_weights: &ArrayView2<f64>, d_attn_out: &ArrayView2<f64>) -> Result<Matrix> {
    let t = attn_weights.nrows();
    if attn_weights.ncols() != t || d_attn_out.nrows() != t {
        return Err(mismatch(
            "grad_v",
            format!(
                "weights {:?} vs upstream {:?}",
                attn_weights.dim(),
                d_attn_out.dim()
            ),
        ));
    }
    Ok(attn_weights.t().dot(d_attn_out))
}

/// Q/K gradients of the parallel and orthogonal halves of `S = S∥ + S⊥`, kept apart.
#[derive(Debug, Clone)]
pub struct UnidirectionalGrads {
    pub parallel: (Matrix, Matrix),
    pub orthogonal: (Matrix, Matrix),
}

impl UnidirectionalGrads {
    pub fn total(&self) -> (Matrix, Matrix) {
        (
            &self.parallel.0 + &self.orthogonal.0,
            &self.parallel.1 + &self.orthogonal.1,
        )
    }

    pub fn weighted(&self, scales: &SimplestScales) -> (Matrix, Matrix) {
        let (a, b) = (scales.alpha_parallel, scales.alpha_orthogonal);
        (
            &self.parallel.0 * a + &self.orthogonal.0 * b,
            &self.parallel.1 * a + &self.orthogonal.1 * b,
        )
    }
}

/// `Π_K⊥ (G K Q^T + Q K^T G^T) K^{+T}`: derivative of `⟨G, Π_K(K) Q K^T⟩` through `Π_K`.
fn projector_cross(
    g: &Matrix,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    kplus_t: &ArrayView2<f64>,
) -> Matrix {
    let qt_kpt = q.t().dot(kplus_t);
    let a = g.dot(&k.dot(&qt_kpt));
    let b = q.dot(&k.t().dot(&g.t().dot(kplus_t)));
    proj_k.orthogonal.dot(&(a + b))
}

/// Gradients of the parallel and orthogonal score halves, including the
/// `QK^T`/`K^+` interaction terms that come from differentiating `Π_K`.
pub fn grad_unidirectional_parts(
    ds_par: &ArrayView2<f64>,
    ds_perp: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    kplus: &Pseudoinverse,
) -> Result<UnidirectionalGrads> {
    const OP: &str = "grad_unidirectional";
    check_qk_ds(OP, ds_par, q, k)?;
    same_shape(OP, ds_par.dim(), ds_perp.dim())?;
    check_projector(OP, proj_k, q.nrows())?;
    check_pinv(OP, kplus, k)?;
    let c = inv_sqrt_d(q);
    let kplus_t = kplus.matrix.t();
    let pk = &proj_k.parallel;
    let pkp = &proj_k.orthogonal;

    let part = |g: &ArrayView2<f64>, p: &Matrix, sign: f64| -> (Matrix, Matrix) {
        let dq = p.t().dot(&g.dot(k)) * c;
        let direct = g.t().dot(&p.dot(q));
        let cross = projector_cross(&g.to_owned(), q, k, proj_k, &kplus_t);
        (dq, (direct + cross * sign) * c)
    };
    Ok(UnidirectionalGrads {
        parallel: part(ds_par, pk, 1.0),
        orthogonal: part(ds_perp, pkp, -1.0),
    })
}

pub fn grad_unidirectional(
    ds_par: &ArrayView2<f64>,
    ds_perp: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    kplus: &Pseudoinverse,
) -> Result<(Matrix, Matrix)> {
    grad_unidirectional_parts(ds_par, ds_perp, q, k, proj_k, kplus).map(|g| g.total())
}

/// `(α∥Π_K + α⊥Π_K⊥)` applied to the standard Q and K gradients.
pub fn grad_simplest(
    ds: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    scales: &SimplestScales,
) -> Result<(Matrix, Matrix)> {
    check_qk_ds("grad_simplest", ds, q, k)?;
    check_projector("grad_simplest", proj_k, q.nrows())?;
    let (dq, dk) = grad_standard(ds, q, k)?;
    let apply = |x: &Matrix| {
        proj_k.parallel.dot(x) * scales.alpha_parallel
            + proj_k.orthogonal.dot(x) * scales.alpha_orthogonal
    };
    Ok((apply(&dq), apply(&dk)))
}

/// `[Π_KΠ_VΠ_K, Π_KΠ_V⊥Π_K, Π_K⊥Π_VΠ_K⊥, Π_K⊥Π_V⊥Π_K⊥]`, which sum to the identity.
pub fn reductionistic_projectors(
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
) -> Result<[Matrix; 4]> {
    if proj_k.dim() != proj_v.dim() {
        return Err(mismatch(
            "reductionistic_projectors",
            format!("{} vs {}", proj_k.dim(), proj_v.dim()),
        ));
    }
    let sandwich = |outer: &Matrix, inner: &Matrix| outer.dot(inner).dot(outer);
    Ok([
        sandwich(&proj_k.parallel, &proj_v.parallel),
        sandwich(&proj_k.parallel, &proj_v.orthogonal),
        sandwich(&proj_k.orthogonal, &proj_v.parallel),
        sandwich(&proj_k.orthogonal, &proj_v.orthogonal),
    ])
}

pub fn grad_reductionistic(
    ds: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    projectors: &[Matrix; 4],
    config: &ScaleConfig,
) -> Result<(Matrix, Matrix)> {
    check_qk_ds("grad_reductionistic", ds, q, k)?;
    for p in projectors {
        same_shape("grad_reductionistic", p.dim(), ds.dim())?;
    }
    let (dq, dk) = grad_standard(ds, q, k)?;
    let mut combined = Matrix::zeros(ds.dim());
    for (p, a) in projectors.iter().zip(config.alpha) {
        combined.scaled_add(a, p);
    }
    Ok((combined.dot(&dq), combined.dot(&dk)))
}

/// `∂L/∂S^B` for all blocks when every block receives the full score gradient.
pub fn routed_block_gradients(ds_total: &ArrayView2<f64>) -> [Matrix; NUM_BLOCKS] {
    std::array::from_fn(|_| ds_total.to_owned())
}

pub fn block_gradients(
    blocks: &ScoreBlocks,
    ds_total: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    d_attn_out: &ArrayView2<f64>,
    mode: BlockGradMode,
    causal: bool,
) -> Result<[Matrix; NUM_BLOCKS]> {
    const OP: &str = "block_gradients";
    let t = ds_total.nrows();
    same_shape(OP, ds_total.dim(), (t, t))?;
    for b in &blocks.blocks {
        same_shape(OP, b.dim(), (t, t))?;
    }
    same_shape(OP, v.dim(), d_attn_out.dim())?;
    if v.nrows() != t {
        return Err(mismatch(
            OP,
            format!("V has {} rows, scores {t}", v.nrows()),
        ));
    }
    match mode {
        BlockGradMode::Routed => Ok(routed_block_gradients(ds_total)),
        BlockGradMode::PerBlockSoftmax => {
            let d_weights = d_attn_out.dot(&v.t());
            let mut out: [Matrix; NUM_BLOCKS] = std::array::from_fn(|_| Matrix::zeros((t, t)));
            for (g, s) in out.iter_mut().zip(&blocks.blocks) {
                let mut s = s.clone();
                if causal {
                    apply_causal_mask(&mut s);
                }
                let a = softmax_rows(&s);
                *g = softmax_backward(&a.view(), &d_weights.view());
            }
            Ok(out)
        }
    }
}

/// Shared `T x d` factors used by the per-order formulas.
struct OrderFactors {
    /// `[Π_V⊥ K, Π_V K]`, indexed by the right factor flag.
    pv_k: [Matrix; 2],
}

impl OrderFactors {
    fn new(k: &ArrayView2<f64>, proj_v: &ProjectorPair) -> Self {
        Self {
            pv_k: [proj_v.orthogonal.dot(k), proj_v.parallel.dot(k)],
        }
    }
}

fn check_block_inputs(
    op: &'static str,
    block_grads: &[Matrix; NUM_BLOCKS],
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
) -> Result<()> {
    let t = k.nrows();
    for g in block_grads {
        same_shape(op, g.dim(), (t, t))?;
    }
    check_projector(op, proj_k, t)?;
    check_projector(op, proj_v, t)
}

/// `∂L/∂Q` grouped by violation order:
/// `Σ_{B in order} (1/√d) (Π_V^α Π_K^β)^T ∂L/∂S^B (Π_V^δ K)`.
pub fn grad_q_by_order(
    block_grads: &[Matrix; NUM_BLOCKS],
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
    k: &ArrayView2<f64>,
) -> Result<[Matrix; NUM_ORDERS]> {
    check_block_inputs("grad_q_by_order", block_grads, k, proj_k, proj_v)?;
    let c = 1.0 / (k.ncols() as f64).sqrt();
    let factors = OrderFactors::new(k, proj_v);
    let mut out: [Matrix; NUM_ORDERS] = std::array::from_fn(|_| Matrix::zeros(k.dim()));
    for (f, g) in BLOCK_FACTORS.iter().zip(block_grads) {
        let inner = g.dot(&factors.pv_k[f.right_v as usize]);
        // (Π_V^α Π_K^β)^T X = Π_K^β^T (Π_V^α^T X)
        let term = proj_k
            .part(f.left_k)
            .t()
            .dot(&proj_v.part(f.left_v).t().dot(&inner));
        out[f.order()].scaled_add(c, &term);
    }
    Ok(out)
}

/// `1-based (β∥ block, β⊥ block)` pairs whose gradient differences drive the
/// cross terms, with the order each pair is booked under.
pub const CROSS_PAIRS: [(usize, usize, usize); 4] = [(1, 3, 1), (2, 4, 2), (5, 7, 2), (6, 8, 3)];

/// Direct and cross `∂L/∂K` terms grouped by violation order.
///
/// Direct terms differentiate the explicit `K^T`; cross terms differentiate
/// `Π_K` through `∂(Π_K)_{ij}/∂K_{ab} = (Π_K⊥)_{aj} K^+_{bi} + (Π_K⊥)_{ai} K^+_{bj}`.
pub fn grad_k_by_order(
    block_grads: &[Matrix; NUM_BLOCKS],
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
    kplus: &Pseudoinverse,
) -> Result<([Matrix; NUM_ORDERS], [Matrix; NUM_ORDERS])> {
    const OP: &str = "grad_k_by_order";
    same_shape(OP, q.dim(), k.dim())?;
    check_block_inputs(OP, block_grads, k, proj_k, proj_v)?;
    check_pinv(OP, kplus, k)?;
    let c = 1.0 / (k.ncols() as f64).sqrt();
    let left = crate::scores::LeftProducts::new(q, proj_k, proj_v);

    let mut direct: [Matrix; NUM_ORDERS] = std::array::from_fn(|_| Matrix::zeros(k.dim()));
    for (f, g) in BLOCK_FACTORS.iter().zip(block_grads) {
        // (1/√d) Π_V^δ^T (∂L/∂S^B)^T Π_V^α Π_K^β Q
        let term = proj_v.part(f.right_v).t().dot(&g.t().dot(left.get(*f)));
        direct[f.order()].scaled_add(c, &term);
    }

    let mut cross: [Matrix; NUM_ORDERS] = std::array::from_fn(|_| Matrix::zeros(k.dim()));
    let kplus_t = kplus.matrix.t();
    let qt_kpt = q.t().dot(&kplus_t);
    for &(b_par, b_perp, order) in &CROSS_PAIRS {
        let f = BLOCK_FACTORS[b_par - 1];
        let diff = &block_grads[b_par - 1] - &block_grads[b_perp - 1];
        let outer_v = proj_v.part(f.left_v);
        let right_v = proj_v.part(f.right_v);
        // Π_K⊥ Q K^T Π_V^δ D^T Π_V^α K^{+T}
        let kt_pv = k.t().dot(right_v);
        let first = q.dot(&kt_pv.dot(&diff.t().dot(&outer_v.dot(&kplus_t))));
        // Π_K⊥ Π_V^α D Π_V^δ K Q^T K^{+T}
        let second = outer_v.dot(&diff.dot(&right_v.dot(k).dot(&qt_kpt)));
        let term = proj_k.orthogonal.dot(&(first + second));
        cross[order].scaled_add(c, &term);
    }
    Ok((direct, cross))
}

/// `(Σ αᵢ dQᵢ, Σ αᵢ (dK_directᵢ + dK_crossᵢ))`.
pub fn combine_scaled(
    dq_orders: &[Matrix; NUM_ORDERS],
    dk_direct: &[Matrix; NUM_ORDERS],
    dk_cross: &[Matrix; NUM_ORDERS],
    config: &ScaleConfig,
) -> (Matrix, Matrix) {
    let mut dq = Matrix::zeros(dq_orders[0].dim());
    let mut dk = Matrix::zeros(dk_direct[0].dim());
    for i in 0..NUM_ORDERS {
        let a = config.alpha[i];
        dq.scaled_add(a, &dq_orders[i]);
        dk.scaled_add(a, &dk_direct[i]);
        dk.scaled_add(a, &dk_cross[i]);
    }
    (dq, dk)
}

pub fn baseline_modulate(
    dq: Matrix,
    dk: Matrix,
    dv: Matrix,
    modulation: &QKVModulation,
) -> (Matrix, Matrix, Matrix) {
    let gate = |m: Matrix, on: bool| if on { m } else { Matrix::zeros(m.dim()) };
    (
        gate(dq, modulation.alpha_q),
        gate(dk, modulation.alpha_k),
        gate(dv, modulation.alpha_v),
    )
}

/// `Π X = M (M^+ X)` without forming the `T x T` projector.
fn apply_projector(source: &ArrayView2<f64>, pinv: &Matrix, x: &Matrix) -> Matrix {
    source.dot(&pinv.dot(x))
}

/// Scaled `(dQ, dK)` of the score decomposition in routed mode.
///
/// Every block receives the same `∂L/∂S`, so the cross terms cancel and the
/// eight block terms fold by linearity into a few projector applications:
///
/// ```text
/// dQ = c Σ_β Π_K^β Σ_α Π_V^α Σ_δ a(α,β,δ) G Π_V^δ K
/// dK = c Σ_δ Π_V^δ G^T Σ_{α,β} a(α,β,δ) Π_V^α Π_K^β Q
/// ```
///
/// with `Π⊥ X = X - Π X`. Agrees with [`score_decomposition_grads`] fed by
/// [`routed_block_gradients`] up to rounding, at `O(T^2 d)` cost.
pub fn grad_score_routed(
    ds: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    kplus: &Matrix,
    vplus: &Matrix,
    scales: &ScaleConfig,
) -> Result<(Matrix, Matrix)> {
    const OP: &str = "grad_score_routed";
    let t = k.nrows();
    same_shape(OP, q.dim(), k.dim())?;
    same_shape(OP, ds.dim(), (t, t))?;
    if v.nrows() != t {
        return Err(mismatch(OP, format!("V has {} rows, K has {t}", v.nrows())));
    }
    same_shape(OP, kplus.dim(), (k.ncols(), t))?;
    same_shape(OP, vplus.dim(), (v.ncols(), t))?;
    let c = 1.0 / (k.ncols() as f64).sqrt();
    // Weight of the block with parallel flags (α, β, δ); index 0 = ⊥, 1 = ∥.
    let a = |lv: usize, lk: usize, rv: usize| scales.alpha[3 - lv - lk - rv];
    let pv = |x: &Matrix| apply_projector(v, vplus, x);
    let pk = |x: &Matrix| apply_projector(k, kplus, x);
    // Π⊥ X⊥ + Π X∥ = X⊥ + Π (X∥ - X⊥)
    let fold = |proj: &dyn Fn(&Matrix) -> Matrix, perp: Matrix, par: Matrix| {
        let delta = &par - &perp;
        if delta.iter().all(|&x| x == 0.0) {
            perp
        } else {
            perp + proj(&delta)
        }
    };

    let k_owned = k.to_owned();
    let gk = ds.dot(k);
    let y_par = ds.dot(&pv(&k_owned));
    let y = [&gk - &y_par, y_par];
    let mut m_beta: [Matrix; 2] = std::array::from_fn(|_| Matrix::zeros(k.dim()));
    for (lk, m) in m_beta.iter_mut().enumerate() {
        let x: [Matrix; 2] = std::array::from_fn(|lv| &y[0] * a(lv, lk, 0) + &y[1] * a(lv, lk, 1));
        let [x_perp, x_par] = x;
        *m = fold(&pv, x_perp, x_par);
    }
    let [m_perp, m_par] = m_beta;
    let dq = fold(&pk, m_perp, m_par) * c;

    let q_owned = q.to_owned();
    let z_par = pk(&q_owned);
    let z_perp = &q_owned - &z_par;
    let z = [z_perp, z_par];
    let pv_z = [pv(&z[0]), pv(&z[1])];
    // u[α][β] = Π_V^α Π_K^β Q
    let u = [[&z[0] - &pv_z[0], &z[1] - &pv_z[1]], pv_z];
    let n: [Matrix; 2] = std::array::from_fn(|rv| {
        let mut acc = Matrix::zeros(k.dim());
        for (lv, row) in u.iter().enumerate() {
            for (lk, m) in row.iter().enumerate() {
                acc.scaled_add(a(lv, lk, rv), m);
            }
        }
        acc
    });
    let [n_perp, n_par] = n;
    let ds_t = ds.t();
    let dk = fold(&pv, ds_t.dot(&n_perp), ds_t.dot(&n_par)) * c;
    Ok((dq, dk))
}

/// Runs the full per-order pipeline for one head and scales it.
#[allow(clippy::too_many_arguments)]
pub fn score_decomposition_grads(
    block_grads: &[Matrix; NUM_BLOCKS],
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
    kplus: &Pseudoinverse,
    dv: Matrix,
    config: &ScaleConfig,
) -> Result<GradientBundle> {
    let dq_by_order = grad_q_by_order(block_grads, proj_k, proj_v, k)?;
    let (dk_by_order_direct, dk_by_order_cross) =
        grad_k_by_order(block_grads, q, k, proj_k, proj_v, kplus)?;
    let (scaled_dq, scaled_dk) = combine_scaled(
        &dq_by_order,
        &dk_by_order_direct,
        &dk_by_order_cross,
        config,
    );
    Ok(GradientBundle {
        dq_by_order,
        dk_by_order_direct,
        dk_by_order_cross,
        dv,
        scaled_dq,
        scaled_dk,
    })
}
