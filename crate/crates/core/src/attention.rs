//! Single-head softmax attention and its backward pass.
//!
//! The forward pass is the same for every gradient method. The backward pass
//! computes `∂L/∂S` through the softmax Jacobian and then hands the score
//! gradient to the configured method from [`crate::grad`].

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, same_shape, Error, Result};
use crate::grad::{
    baseline_modulate, block_gradients, grad_reductionistic, grad_score_routed, grad_simplest,
    grad_standard, grad_unidirectional_parts, grad_v, reductionistic_projectors,
    score_decomposition_grads, BlockGradMode, QKVModulation, ScaleConfig, SimplestScales,
};
use crate::linalg::{
    projector, projector_with_pinv, pseudoinverse_matrix, Matrix, RegularizationPolicy, SpanSource,
};
use crate::scores::decompose_bidirectional;

/// Finite stand-in for `-∞` on masked score entries.
pub const MASK_VALUE: f64 = -1e9;

/// Sets every entry above the diagonal to [`MASK_VALUE`].
pub fn apply_causal_mask(s: &mut Matrix) {
    for ((i, j), v) in s.indexed_iter_mut() {
        if j > i {
            *v = MASK_VALUE;
        }
    }
}

/// Row-wise softmax.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // exp underflows to exactly zero below this; skipping it is bitwise neutral.
            let x = *v - max;
            *v = if x < -746.0 { 0.0 } else { x.exp() };
            sum += *v;
        }
        row /= sum;
    }
    out
}

/// `∂L/∂S` from softmax output `A` and `∂L/∂A`: `A ⊙ (dA - rowsum(A ⊙ dA))`.
pub fn softmax_backward(a: &ArrayView2<f64>, d_a: &ArrayView2<f64>) -> Matrix {
    let mut out = Matrix::zeros(a.dim());
    for ((mut o, ar), dr) in out
        .axis_iter_mut(Axis(0))
        .zip(a.axis_iter(Axis(0)))
        .zip(d_a.axis_iter(Axis(0)))
    {
        let dot: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
        Zip::from(&mut o)
            .and(&ar)
            .and(&dr)
            .for_each(|o, &p, &g| *o = p * (g - dot));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Matrix,
    /// Row-stochastic attention weights `A`.
    pub weights: Matrix,
    /// Scaled scores with masked entries set to [`MASK_VALUE`].
    pub scores: Matrix,
}

pub fn attention_forward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    causal: bool,
) -> Result<AttentionOutput> {
    same_shape("attention_forward", q.dim(), k.dim())?;
    if v.nrows() != k.nrows() {
        return Err(mismatch(
            "attention_forward",
            format!("V has {} rows, K has {}", v.nrows(), k.nrows()),
        ));
    }
    let mut scores = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    if causal {
        apply_causal_mask(&mut scores);
    }
    for (row, r) in scores.axis_iter(Axis(0)).enumerate() {
        if r.iter().all(|&x| x <= MASK_VALUE) {
            return Err(Error::DegenerateRow { row });
        }
    }
    let weights = softmax_rows(&scores);
    let out = weights.dot(v);
    Ok(AttentionOutput {
        out,
        weights,
        scores,
    })
}

/// Which backward rule produces `dQ`, `dK` from the score gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMethod {
    #[default]
    Standard,
    Unidirectional,
    Simplest,
    Reductionistic,
    #[serde(alias = "score")]
    ScoreDecomposition,
}

impl GradMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Unidirectional => "unidirectional",
            Self::Simplest => "simplest",
            Self::Reductionistic => "reductionistic",
            Self::ScoreDecomposition => "score_decomposition",
        }
    }
}

impl fmt::Display for GradMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "unidirectional" => Ok(Self::Unidirectional),
            "simplest" => Ok(Self::Simplest),
            "reductionistic" => Ok(Self::Reductionistic),
            "score" | "score_decomposition" => Ok(Self::ScoreDecomposition),
            _ => Err(Error::InvalidConfig(format!(
                "unknown gradient method `{s}`"
            ))),
        }
    }
}

/// Everything that selects and parameterizes the attention backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradConfig {
    pub method: GradMethod,
    /// Order scales for `reductionistic` and `score_decomposition`.
    pub scales: ScaleConfig,
    /// `α∥`, `α⊥` for `simplest` and `unidirectional`.
    pub simplest: SimplestScales,
    pub modulation: QKVModulation,
    pub block_mode: BlockGradMode,
    pub regularization: RegularizationPolicy,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            method: GradMethod::Standard,
            scales: ScaleConfig::UNIT,
            simplest: SimplestScales::default(),
            modulation: QKVModulation::ALL,
            block_mode: BlockGradMode::Routed,
            regularization: RegularizationPolicy::training(),
        }
    }
}

impl GradConfig {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn score(scales: ScaleConfig) -> Self {
        Self {
            method: GradMethod::ScoreDecomposition,
            scales,
            ..Self::default()
        }
    }

    pub fn modulated(modulation: QKVModulation) -> Self {
        Self {
            modulation,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ScaleConfig::new(self.scales.alpha)?;
        SimplestScales::new(self.simplest.alpha_parallel, self.simplest.alpha_orthogonal)?;
        self.regularization.validate()
    }

    /// Short human-readable tag, e.g. `standard`, `score[1000]`, `QKV001`.
    pub fn label(&self) -> String {
        let base = match self.method {
            GradMethod::Standard => "standard".to_string(),
            GradMethod::ScoreDecomposition => format!("score{}", self.scales),
            GradMethod::Reductionistic => format!("reductionistic{}", self.scales),
            GradMethod::Simplest | GradMethod::Unidirectional => format!(
                "{}[{},{}]",
                self.method, self.simplest.alpha_parallel, self.simplest.alpha_orthogonal
            ),
        };
        if self.modulation == QKVModulation::ALL {
            base
        } else if self.method == GradMethod::Standard {
            self.modulation.to_string()
        } else {
            format!("{base}+{}", self.modulation)
        }
    }
}

/// `(dQ, dK, dV)` of one head from the cached forward quantities.
pub fn attention_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    weights: &ArrayView2<f64>,
    d_attn_out: &ArrayView2<f64>,
    config: &GradConfig,
    causal: bool,
) -> Result<(Matrix, Matrix, Matrix)> {
    same_shape("attention_backward", v.dim(), d_attn_out.dim())?;
    let dv = grad_v(weights, d_attn_out)?;
    let d_weights = d_attn_out.dot(&v.t());
    let ds = softmax_backward(weights, &d_weights.view());
    let policy = &config.regularization;

    let (dq, dk, dv) = match config.method {
        GradMethod::Standard => {
            let (dq, dk) = grad_standard(&ds.view(), q, k)?;
            (dq, dk, dv)
        }
        GradMethod::Unidirectional => {
            let (pk, kplus) = projector_with_pinv(k, policy, SpanSource::K)?;
            let parts = grad_unidirectional_parts(&ds.view(), &ds.view(), q, k, &pk, &kplus)?;
            let (dq, dk) = parts.weighted(&config.simplest);
            (dq, dk, dv)
        }
        GradMethod::Simplest => {
            let pk = projector(k, policy, SpanSource::K)?;
            let (dq, dk) = grad_simplest(&ds.view(), q, k, &pk, &config.simplest)?;
            (dq, dk, dv)
        }
        GradMethod::Reductionistic => {
            let pk = projector(k, policy, SpanSource::K)?;
            let pv = projector(v, policy, SpanSource::V)?;
            let projectors = reductionistic_projectors(&pk, &pv)?;
            let (dq, dk) = grad_reductionistic(&ds.view(), q, k, &projectors, &config.scales)?;
            (dq, dk, dv)
        }
        GradMethod::ScoreDecomposition => match config.block_mode {
            BlockGradMode::Routed => {
                let kplus = pseudoinverse_matrix(k, policy)?;
                let vplus = pseudoinverse_matrix(v, policy)?;
                let (dq, dk) =
                    grad_score_routed(&ds.view(), q, k, v, &kplus, &vplus, &config.scales)?;
                (dq, dk, dv)
            }
            BlockGradMode::PerBlockSoftmax => {
                let (pk, kplus) = projector_with_pinv(k, policy, SpanSource::K)?;
                let pv = projector(v, policy, SpanSource::V)?;
                let blocks = decompose_bidirectional(q, k, &pk, &pv)?;
                let block_grads = block_gradients(
                    &blocks,
                    &ds.view(),
                    v,
                    d_attn_out,
                    config.block_mode,
                    causal,
                )?;
                let bundle = score_decomposition_grads(
                    &block_grads,
                    q,
                    k,
                    &pk,
                    &pv,
                    &kplus,
                    dv,
                    &config.scales,
                )?;
                (bundle.scaled_dq, bundle.scaled_dk, bundle.dv)
            }
        },
    };
    Ok(baseline_modulate(dq, dk, dv, &config.modulation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_position_passes_value_through() {
        let q = array![[0.3, -0.2]];
        let v = array![[1.5, 2.5]];
        let out = attention_forward(&q.view(), &q.view(), &v.view(), true).unwrap();
        assert_eq!(out.weights, array![[1.0]]);
        assert_eq!(out.out, v);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let q = array![[0.3, -0.2], [1.0, 0.4], [0.0, 2.0]];
        let out =
            attention_forward(&q.view(), &q.view(), &Matrix::zeros((3, 2)).view(), false).unwrap();
        assert!(out.out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_scores_with_causal_mask() {
        let t = 5;
        let q = Matrix::zeros((t, 3));
        let k = array![
            [1.0, 0.0, 2.0],
            [0.5, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [2.0, 0.1, 0.3]
        ];
        let v = Matrix::ones((t, 3));
        let out = attention_forward(&q.view(), &k.view(), &v.view(), true).unwrap();
        for i in 0..t {
            for j in 0..t {
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((out.weights[[i, j]] - expect).abs() < 1e-15);
            }
            let s: f64 = out.weights.row(i).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn v_only_limit_and_method_parsing() {
        let q = array![[0.3, -0.2], [1.0, 0.4], [0.0, 2.0], [0.7, 0.7]];
        let k = array![[0.1, 0.9], [1.2, -0.4], [0.5, 0.5], [-0.3, 0.8]];
        let v = array![[1.0, 0.0], [0.3, 0.2], [0.9, -1.0], [0.4, 0.6]];
        let fwd = attention_forward(&q.view(), &k.view(), &v.view(), true).unwrap();
        let up = array![[0.2, -0.1], [0.5, 0.3], [-0.7, 0.2], [0.1, 0.9]];
        let std_cfg = GradConfig {
            regularization: RegularizationPolicy::exact(),
            ..GradConfig::standard()
        };
        let (_, _, dv_std) = attention_backward(
            &q.view(),
            &k.view(),
            &v.view(),
            &fwd.weights.view(),
            &up.view(),
            &std_cfg,
            true,
        )
        .unwrap();
        let zero = GradConfig {
            regularization: RegularizationPolicy::exact(),
            ..GradConfig::score(ScaleConfig::ZERO)
        };
        let (dq, dk, dv) = attention_backward(
            &q.view(),
            &k.view(),
            &v.view(),
            &fwd.weights.view(),
            &up.view(),
            &zero,
            true,
        )
        .unwrap();
        assert!(dq.iter().chain(dk.iter()).all(|&x| x == 0.0));
        assert_eq!(dv, dv_std);

        assert_eq!(
            "score".parse::<GradMethod>().unwrap(),
            GradMethod::ScoreDecomposition
        );
        assert!("bogus".parse::<GradMethod>().is_err());
        assert_eq!(
            GradConfig::score("1000".parse().unwrap()).label(),
            "score[1000]"
        );
        assert_eq!(
            GradConfig::modulated(QKVModulation::V_ONLY).label(),
            "QKV001"
        );
    }
}
