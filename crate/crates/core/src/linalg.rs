//! Gram matrices, pseudoinverses and span projectors.
//!
//! Every projector is materialized as an explicit `T x T` matrix. The Gram
//! inverse goes through a symmetric eigendecomposition so that rank and
//! conditioning are available alongside the inverse. [`pseudoinverse_matrix`]
//! skips that bookkeeping with a Cholesky solve when a ridge is set.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};

/// Dense row-major `f64` matrix used throughout the crate.
pub type Matrix = Array2<f64>;

/// Builds a matrix from row-major data, rejecting non-finite entries.
pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
    if data.len() != rows * cols {
        return Err(mismatch(
            "dense",
            format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ),
        ));
    }
    let m =
        Array2::from_shape_vec((rows, cols), data).map_err(|e| mismatch("dense", e.to_string()))?;
    ensure_finite(&m.view())?;
    Ok(m)
}

/// Builds a matrix from a slice of equally long rows.
pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, |r| r.as_ref().len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        let r = r.as_ref();
        if r.len() != cols {
            return Err(mismatch("from_rows", "ragged rows"));
        }
        data.extend_from_slice(r);
    }
    dense(rows.len(), cols, data)
}

pub fn ensure_finite(m: &ArrayView2<f64>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `Tr(a^T b)`.
pub fn frobenius_inner(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `‖a - b‖_F`.
pub fn frobenius_distance(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Which matrix a projector spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanSource {
    Q,
    K,
    V,
}

/// How the Gram matrix is regularized before inversion.
///
/// With `ridge_relative` set, the ridge actually added is
/// `ridge_epsilon * trace(G) / d`; otherwise `ridge_epsilon` is absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPolicy {
    pub ridge_epsilon: f64,
    pub rank_tolerance: f64,
    #[serde(default)]
    pub ridge_relative: bool,
}

impl RegularizationPolicy {
    pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

    /// No ridge. Used by the verification suites.
    pub fn exact() -> Self {
        Self {
            ridge_epsilon: 0.0,
            rank_tolerance: Self::DEFAULT_RANK_TOLERANCE,
            ridge_relative: false,
        }
    }

    /// Ridge of `1e-8 * trace(G) / d`; never fails on rank-deficient keys.
    pub fn training() -> Self {
        Self {
            ridge_epsilon: 1e-8,
            rank_tolerance: Self::DEFAULT_RANK_TOLERANCE,
            ridge_relative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_epsilon >= 0.0 && self.ridge_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge_epsilon must be finite and >= 0, got {}",
                self.ridge_epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.rank_tolerance) {
            return Err(Error::InvalidConfig(format!(
                "rank_tolerance must lie in [0, 1), got {}",
                self.rank_tolerance
            )));
        }
        Ok(())
    }

    fn ridge_for(&self, gram: &Matrix) -> f64 {
        if !self.ridge_relative || self.ridge_epsilon == 0.0 {
            return self.ridge_epsilon;
        }
        let d = gram.nrows().max(1) as f64;
        let trace = gram.diag().sum();
        if trace > 0.0 {
            self.ridge_epsilon * trace / d
        } else {
            // G = 0 means M = 0 and any positive ridge gives M^+ = 0.
            1.0
        }
    }
}

impl Default for RegularizationPolicy {
    fn default() -> Self {
        Self::exact()
    }
}

/// `M^+ = (M^T M + εI)^{-1} M^T` together with the inverse it was built from.
#[derive(Debug, Clone)]
pub struct Pseudoinverse {
    /// `d x T`.
    pub matrix: Matrix,
    /// `d x d`.
    pub gram_inverse: Matrix,
    /// Ridge actually added to the Gram diagonal.
    pub ridge: f64,
    /// Numerical rank of the source matrix.
    pub rank: usize,
    /// Ratio of largest to smallest Gram eigenvalue (infinite when singular).
    pub condition: f64,
}

/// A parallel projector onto a column span and its orthogonal complement.
#[derive(Debug, Clone)]
pub struct ProjectorPair {
    pub parallel: Matrix,
    pub orthogonal: Matrix,
    pub source_rank: usize,
    pub source_label: SpanSource,
}

impl ProjectorPair {
    pub fn dim(&self) -> usize {
        self.parallel.nrows()
    }

    /// `parallel` for `true`, `orthogonal` for `false`.
    pub fn part(&self, parallel: bool) -> &Matrix {
        if parallel {
            &self.parallel
        } else {
            &self.orthogonal
        }
    }

    /// Pair from an explicit parallel projector; the complement is `I - P`.
    pub fn from_parallel(parallel: Matrix, source_rank: usize, source_label: SpanSource) -> Self {
        let orthogonal = complement(&parallel);
        Self {
            parallel,
            orthogonal,
            source_rank,
            source_label,
        }
    }
}

/// `I - P`.
pub fn complement(p: &Matrix) -> Matrix {
    let mut out = -p;
    for i in 0..p.nrows() {
        out[[i, i]] += 1.0;
    }
    out
}

/// `M^T M`, symmetrized so that it is exactly symmetric.
pub fn gram(m: &ArrayView2<f64>) -> Matrix {
    let mut g = m.t().dot(m);
    let n = g.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = avg;
            g[[j, i]] = avg;
        }
    }
    g
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues (unsorted) and the orthogonal matrix whose columns are
/// the matching eigenvectors.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    // Row-major working copies; index (i, j) is i * n + j.
    let mut a: Vec<f64> = a.iter().cloned().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += a[i * n + i] * a[i * n + i];
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off == 0.0 || off <= 1e-32 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                let (head, tail) = a.split_at_mut(q * n);
                let row_p = &mut head[p * n..(p + 1) * n];
                let row_q = &mut tail[..n];
                for (apk, aqk) in row_p.iter_mut().zip(row_q.iter_mut()) {
                    let (x, y) = (*apk, *aqk);
                    *apk = c * x - s * y;
                    *aqk = s * x + c * y;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    let vectors = Matrix::from_shape_vec((n, n), v).expect("n x n buffer");
    (eigenvalues, vectors)
}

/// Number of singular values above `tol * σ_max`, read off Gram eigenvalues.
fn rank_from_gram_eigenvalues(eigenvalues: &[f64], tol: f64) -> usize {
    let sigma: Vec<f64> = eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > tol * max).count()
}

pub fn pseudoinverse(m: &ArrayView2<f64>, policy: &RegularizationPolicy) -> Result<Pseudoinverse> {
    policy.validate()?;
    let (t, d) = m.dim();
    if t == 0 || d == 0 {
        return Err(mismatch("pseudoinverse", format!("empty {t}x{d} input")));
    }
    ensure_finite(m)?;
    let g = gram(m);
    let (eigenvalues, vectors) = symmetric_eigen(&g.view());
    let max = eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let ridge = policy.ridge_for(&g);
    if ridge == 0.0 && (max <= 0.0 || min <= policy.rank_tolerance * max) {
        return Err(Error::SingularGram {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    // G^{-1} = V diag(1 / (λ + ε)) V^T
    let inv_diag: Vec<f64> = eigenvalues
        .iter()
        .map(|l| 1.0 / (l.max(0.0) + ridge))
        .collect();
    let mut scaled = vectors.clone();
    for (mut col, w) in scaled.axis_iter_mut(Axis(1)).zip(&inv_diag) {
        col *= *w;
    }
    let gram_inverse = scaled.dot(&vectors.t());
    let matrix = gram_inverse.dot(&m.t());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(Pseudoinverse {
        matrix,
        gram_inverse,
        ridge,
        rank: rank_from_gram_eigenvalues(&eigenvalues, policy.rank_tolerance),
        condition,
    })
}

/// In-place Cholesky factor `L` (lower triangle) of a row-major `n x n` matrix.
/// Returns `false` if a pivot is not positive.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Just the `d x T` matrix `(M^T M + εI)^{-1} M^T`.
///
/// With a positive ridge this is a Cholesky solve; otherwise, or if the
/// factorization breaks down, it defers to [`pseudoinverse`] and its
/// singularity checks.
pub fn pseudoinverse_matrix(m: &ArrayView2<f64>, policy: &RegularizationPolicy) -> Result<Matrix> {
    policy.validate()?;
    let (t, d) = m.dim();
    if t == 0 || d == 0 {
        return Err(mismatch("pseudoinverse", format!("empty {t}x{d} input")));
    }
    ensure_finite(m)?;
    let g = gram(m);
    let ridge = policy.ridge_for(&g);
    if ridge > 0.0 {
        let mut l: Vec<f64> = g.iter().cloned().collect();
        for i in 0..d {
            l[i * d + i] += ridge;
        }
        if cholesky_in_place(&mut l, d) {
            // Solve L L^T x = m_r for each row m_r of M; x becomes column r of M^+.
            let mut out = vec![0.0; d * t];
            let mut col = vec![0.0; d];
            for (r, row) in m.axis_iter(Axis(0)).enumerate() {
                for (c, v) in col.iter_mut().zip(row.iter()) {
                    *c = *v;
                }
                for i in 0..d {
                    let li = &l[i * d..i * d + i];
                    let s: f64 = li.iter().zip(&col[..i]).map(|(a, b)| a * b).sum();
                    col[i] = (col[i] - s) / l[i * d + i];
                }
                for i in (0..d).rev() {
                    let mut s = col[i];
                    for k in (i + 1)..d {
                        s -= l[k * d + i] * col[k];
                    }
                    col[i] = s / l[i * d + i];
                }
                for (i, c) in col.iter().enumerate() {
                    out[i * t + r] = *c;
                }
            }
            let x = Matrix::from_shape_vec((d, t), out).expect("d x T buffer");
            return Ok(x);
        }
    }
    Ok(pseudoinverse(m, policy)?.matrix)
}

/// Projector pair onto `span(M)` together with the pseudoinverse that built it.
pub fn projector_with_pinv(
    m: &ArrayView2<f64>,
    policy: &RegularizationPolicy,
    label: SpanSource,
) -> Result<(ProjectorPair, Pseudoinverse)> {
    let pinv = pseudoinverse(m, policy)?;
    // Without a ridge, columns spanning all of R^T project onto the identity.
    let parallel = if pinv.ridge == 0.0 && pinv.rank == m.nrows() {
        Matrix::eye(m.nrows())
    } else {
        m.dot(&pinv.matrix)
    };
    let pair = ProjectorPair::from_parallel(parallel, pinv.rank, label);
    Ok((pair, pinv))
}

pub fn projector(
    m: &ArrayView2<f64>,
    policy: &RegularizationPolicy,
    label: SpanSource,
) -> Result<ProjectorPair> {
    projector_with_pinv(m, policy, label).map(|(p, _)| p)
}
