//! Score matrix construction and its span decompositions.
//!
//! The bidirectional decomposition uses the asymmetric ordering where `Q` is
//! split by `(Π_V + Π_V⊥)(Π_K + Π_K⊥)` and `K` by `(Π_V + Π_V⊥)`. Each of the
//! eight surviving blocks is
//!
//! ```text
//! S^B = (1/√d) · L_B Q · K^T Π_K R_B,   L_B = Π_V^α Π_K^β,   R_B = Π_V^δ
//! ```
//!
//! with `(α, β, δ)` fixed per block by [`BLOCK_FACTORS`].

use ndarray::ArrayView2;

use crate::error::{mismatch, same_shape, Result};
use crate::linalg::{frobenius, frobenius_inner, Matrix, ProjectorPair};

pub const NUM_BLOCKS: usize = 8;
pub const NUM_ORDERS: usize = 4;

/// Projector choices of one block: `true` is the parallel projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFactors {
    /// Outer left factor, `Π_V` or `Π_V⊥`.
    pub left_v: bool,
    /// Inner left factor, `Π_K` or `Π_K⊥`.
    pub left_k: bool,
    /// Right factor after `K^T Π_K`, `Π_V` or `Π_V⊥`.
    pub right_v: bool,
}

impl BlockFactors {
    /// Number of orthogonal projectors in the block.
    pub const fn order(&self) -> usize {
        (!self.left_v) as usize + (!self.left_k) as usize + (!self.right_v) as usize
    }

    /// Index 0..4 of the cached left product `Π_V^α Π_K^β Q`.
    pub const fn left_index(&self) -> usize {
        (!self.left_v as usize) * 2 + (!self.left_k as usize)
    }
}

const fn bf(left_v: bool, left_k: bool, right_v: bool) -> BlockFactors {
    BlockFactors {
        left_v,
        left_k,
        right_v,
    }
}

/// Factors of blocks `S^1 ..= S^8` (index `B - 1`).
pub const BLOCK_FACTORS: [BlockFactors; NUM_BLOCKS] = [
    bf(true, true, true),    // S1
    bf(true, true, false),   // S2
    bf(true, false, true),   // S3
    bf(true, false, false),  // S4
    bf(false, true, true),   // S5
    bf(false, true, false),  // S6
    bf(false, false, true),  // S7
    bf(false, false, false), // S8
];

/// Violation order of blocks `S^1 ..= S^8`.
pub const ORDER_OF: [usize; NUM_BLOCKS] = [0, 1, 1, 2, 1, 2, 2, 3];

/// 1-based block numbers per violation order.
pub const BLOCKS_BY_ORDER: [&[usize]; NUM_ORDERS] = [&[1], &[2, 3, 5], &[4, 6, 7], &[8]];

/// The only 1-based block pairs whose Frobenius inner product may be non-zero.
pub const EXCEPTION_PAIRS: [(usize, usize); 4] = [(1, 3), (2, 4), (5, 7), (6, 8)];

pub fn is_exception_pair(a: usize, b: usize) -> bool {
    EXCEPTION_PAIRS
        .iter()
        .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
}

/// `QK^T / √d`.
pub fn score(q: &ArrayView2<f64>, k: &ArrayView2<f64>) -> Result<Matrix> {
    same_shape("score", q.dim(), k.dim())?;
    let d = q.ncols() as f64;
    Ok(q.dot(&k.t()) / d.sqrt())
}

#[derive(Debug, Clone)]
pub struct UnidirectionalSplit {
    pub s_parallel: Matrix,
    pub s_orthogonal: Matrix,
}

pub fn split_unidirectional(
    s: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
) -> Result<UnidirectionalSplit> {
    if s.nrows() != proj_k.dim() || s.ncols() != proj_k.dim() {
        return Err(mismatch(
            "split_unidirectional",
            format!("score {:?} vs projector {}", s.dim(), proj_k.dim()),
        ));
    }
    Ok(UnidirectionalSplit {
        s_parallel: proj_k.parallel.dot(s),
        s_orthogonal: proj_k.orthogonal.dot(s),
    })
}

/// The eight non-zero score blocks, `blocks[B - 1] = S^B`.
#[derive(Debug, Clone)]
pub struct ScoreBlocks {
    pub blocks: [Matrix; NUM_BLOCKS],
}

impl ScoreBlocks {
    /// `S^B` for 1-based `b`.
    pub fn block(&self, b: usize) -> &Matrix {
        &self.blocks[b - 1]
    }

    pub fn order_of(b: usize) -> usize {
        ORDER_OF[b - 1]
    }

    pub fn sum(&self) -> Matrix {
        let mut total = self.blocks[0].clone();
        for b in &self.blocks[1..] {
            total += b;
        }
        total
    }

    /// `Σ_{B in order} ‖S^B‖_F²` for each order.
    pub fn squared_norms_by_order(&self) -> [f64; NUM_ORDERS] {
        let mut out = [0.0; NUM_ORDERS];
        for (i, b) in self.blocks.iter().enumerate() {
            let n = frobenius(&b.view());
            out[ORDER_OF[i]] += n * n;
        }
        out
    }
}

/// Shared factors of the bidirectional decomposition.
pub(crate) struct LeftProducts {
    /// `Π_V^α Π_K^β Q`, indexed by [`BlockFactors::left_index`].
    pub lq: [Matrix; 4],
}

impl LeftProducts {
    pub fn new(q: &ArrayView2<f64>, proj_k: &ProjectorPair, proj_v: &ProjectorPair) -> Self {
        let kq = proj_k.parallel.dot(q);
        let kpq = proj_k.orthogonal.dot(q);
        Self {
            lq: [
                proj_v.parallel.dot(&kq),
                proj_v.parallel.dot(&kpq),
                proj_v.orthogonal.dot(&kq),
                proj_v.orthogonal.dot(&kpq),
            ],
        }
    }

    pub fn get(&self, f: BlockFactors) -> &Matrix {
        &self.lq[f.left_index()]
    }
}

fn check_decomposition_inputs(
    op: &'static str,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
) -> Result<()> {
    same_shape(op, q.dim(), k.dim())?;
    let t = q.nrows();
    if proj_k.dim() != t || proj_v.dim() != t {
        return Err(mismatch(
            op,
            format!(
                "sequence length {t} vs projectors {} / {}",
                proj_k.dim(),
                proj_v.dim()
            ),
        ));
    }
    Ok(())
}

pub fn decompose_bidirectional(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
) -> Result<ScoreBlocks> {
    check_decomposition_inputs("decompose_bidirectional", q, k, proj_k, proj_v)?;
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let left = LeftProducts::new(q, proj_k, proj_v);
    let kt_pk = k.t().dot(&proj_k.parallel);
    let right = [kt_pk.dot(&proj_v.orthogonal), kt_pk.dot(&proj_v.parallel)];
    let blocks = BLOCK_FACTORS.map(|f| left.get(f).dot(&right[f.right_v as usize]) * scale);
    Ok(ScoreBlocks { blocks })
}

/// Largest Frobenius norm among the eight components with `Π_K⊥` right of `K^T`.
///
/// These vanish identically because `K^T Π_K⊥ = 0`.
pub fn vanishing_block_check(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    proj_k: &ProjectorPair,
    proj_v: &ProjectorPair,
) -> Result<f64> {
    check_decomposition_inputs("vanishing_block_check", q, k, proj_k, proj_v)?;
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let left = LeftProducts::new(q, proj_k, proj_v);
    let kt_pkp = k.t().dot(&proj_k.orthogonal);
    let right = [kt_pkp.dot(&proj_v.parallel), kt_pkp.dot(&proj_v.orthogonal)];
    let mut worst: f64 = 0.0;
    for l in &left.lq {
        for r in &right {
            worst = worst.max(frobenius(&l.dot(r).view()) * scale);
        }
    }
    Ok(worst)
}

/// 8x8 table of `⟨S^A, S^B⟩ = Tr((S^A)^T S^B)`, zero-based indices.
pub fn orthogonality_table(blocks: &ScoreBlocks) -> Matrix {
    let mut table = Matrix::zeros((NUM_BLOCKS, NUM_BLOCKS));
    for a in 0..NUM_BLOCKS {
        for b in a..NUM_BLOCKS {
            let v = frobenius_inner(&blocks.blocks[a].view(), &blocks.blocks[b].view());
            table[[a, b]] = v;
            table[[b, a]] = v;
        }
    }
    table
}

/// Largest `|⟨S^A, S^B⟩| / (‖S^A‖‖S^B‖)` over non-exception pairs `A ≠ B`.
pub fn max_non_exception_coupling(blocks: &ScoreBlocks) -> f64 {
    let table = orthogonality_table(blocks);
    let norms: Vec<f64> = table.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut worst: f64 = 0.0;
    for a in 0..NUM_BLOCKS {
        for b in 0..NUM_BLOCKS {
            if a == b || is_exception_pair(a + 1, b + 1) {
                continue;
            }
            let denom = norms[a] * norms[b];
            if denom > 0.0 {
                worst = worst.max(table[[a, b]].abs() / denom);
            }
        }
    }
    worst
}

/// Row sums of the inner-product table regrouped by order.
pub fn order_coupling(table: &Matrix) -> Matrix {
    let mut out = Matrix::zeros((NUM_ORDERS, NUM_ORDERS));
    for ((a, b), v) in table.indexed_iter() {
        out[[ORDER_OF[a], ORDER_OF[b]]] += v;
    }
    out
}

/// `‖S^B‖_F` for `B = 1..=8`.
pub fn block_norms(blocks: &ScoreBlocks) -> Vec<f64> {
    blocks.blocks.iter().map(|b| frobenius(&b.view())).collect()
}
