//! Pre-layer-norm transformer language model with a hand-written backward pass.
//!
//! ```text
//! x0 = tok_emb[ids] + pos_emb
//! per layer:
//!   h1 = LN1(x);  Q, K, V = h1 W_Q, h1 W_K, h1 W_V
//!   x  = x + dropout(concat_h attn(Q_h, K_h, V_h) W_O)
//!   h2 = LN2(x);  x = x + dropout(GELU(h2 W_1 + b_1)) W_2 + b_2
//! logits = LN_f(x) W_out
//! ```
//!
//! Attention gradients are delegated per head to
//! [`crate::attention::attention_backward`], which applies the configured
//! gradient method. Everything else is the ordinary backward pass.

use std::path::Path;

use ndarray::{s, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, GradConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default)]
    pub grad: GradConfig,
}

fn default_ffn_ratio() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_vocab() -> usize {
    256
}
fn default_causal() -> bool {
    true
}

impl ModelConfig {
    /// Byte-level causal model with the default 4:1 FFN and dropout 0.1.
    pub fn new(seq_len: usize, model_dim: usize, num_heads: usize, num_layers: usize) -> Self {
        Self {
            seq_len,
            model_dim,
            num_heads,
            num_layers,
            ffn_ratio: default_ffn_ratio(),
            dropout_rate: default_dropout(),
            vocab_size: default_vocab(),
            causal: true,
            grad: GradConfig::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.model_dim * self.ffn_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.seq_len == 0 || self.model_dim == 0 || self.num_heads == 0 || self.vocab_size == 0 {
            return bad("seq_len, model_dim, num_heads and vocab_size must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads {} must divide model_dim {}",
                self.num_heads, self.model_dim
            ));
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        self.grad.validate()
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.seq_len < self.head_dim() {
            out.push(format!(
                "seq_len {} < head_dim {}: per-head K and V cannot have full column rank",
                self.seq_len,
                self.head_dim()
            ));
        }
        out
    }
}

/// Parameters of one transformer block. Vectors are stored as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
}

/// All model parameters. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    pub w_out: Matrix,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_gain: Matrix::zeros((1, d)),
            ln1_bias: Matrix::zeros((1, d)),
            w_q: Matrix::zeros((d, d)),
            w_k: Matrix::zeros((d, d)),
            w_v: Matrix::zeros((d, d)),
            w_o: Matrix::zeros((d, d)),
            ln2_gain: Matrix::zeros((1, d)),
            ln2_bias: Matrix::zeros((1, d)),
            w_ff1: Matrix::zeros((d, f)),
            b_ff1: Matrix::zeros((1, f)),
            w_ff2: Matrix::zeros((f, d)),
            b_ff2: Matrix::zeros((1, d)),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }
}

impl ModelState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            tok_emb: Matrix::zeros((cfg.vocab_size, d)),
            pos_emb: Matrix::zeros((cfg.seq_len, d)),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::zeros(d, cfg.ffn_dim()))
                .collect(),
            lnf_gain: Matrix::zeros((1, d)),
            lnf_bias: Matrix::zeros((1, d)),
            w_out: Matrix::zeros((d, cfg.vocab_size)),
        }
    }

    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut state = Self::zeros(cfg);
        for (name, m) in state.tensors_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            if leaf.ends_with("gain") {
                m.fill(1.0);
            } else if leaf.starts_with("w_") || leaf.ends_with("emb") {
                m.mapv_inplace(|_| rng.sample(normal));
            }
        }
        Ok(state)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.tensors_mut() {
            m.fill(0.0);
        }
        out
    }

    /// Named tensors in a fixed order (also the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .tensors()
                    .into_iter()
                    .map(|(n, m)| (format!("layers.{l}.{n}"), m)),
            );
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("layers.{l}.{n}"), m)),
            );
        }
        out.push(("lnf_gain".to_string(), &mut self.lnf_gain));
        out.push(("lnf_bias".to_string(), &mut self.lnf_bias));
        out.push(("w_out".to_string(), &mut self.w_out));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += other * c`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelState, c: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(c, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

/// Dropout behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    /// Masks drawn from a ChaCha stream seeded with this value.
    Seeded(u64),
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row *= r;
        rstd.push(r);
    }
    let out = &xhat * gain + bias;
    (out, LayerNormCache { xhat, rstd })
}

/// Returns `dx` and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gain: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Matrix::zeros(dy.dim());
    for (((mut out, g), xh), r) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.rstd)
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    dx
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF `Φ(x)`; GELU is `x Φ(x)`.
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2))
}

/// `d/dx x Φ(x) = Φ(x) + x φ(x)`.
fn gelu_grad(x: f64, cdf: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    cdf + x * (-0.5 * x * x).exp() * INV_SQRT_2PI
}

/// Inverted-dropout mask with entries `0` or `1 / (1 - rate)`.
fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let threshold = (rate * 4_294_967_296.0) as u64;
    let data = (0..shape.0 * shape.1)
        .map(|_| {
            if u64::from(rng.next_u32()) < threshold {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Matrix::from_shape_vec(shape, data).expect("shape matches length")
}

/// Forward activations of one block.
#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1: LayerNormCache,
    h1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention weights, indexed `[sequence * num_heads + head]`.
    pub weights: Vec<Matrix>,
    concat: Matrix,
    mask_attn: Option<Matrix>,
    ln2: LayerNormCache,
    h2: Matrix,
    ff_pre: Matrix,
    ff_cdf: Matrix,
    ff_act: Matrix,
    mask_ff: Option<Matrix>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
    pub layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    hf: Matrix,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }
}

/// Next-token logits (`batch * len x vocab`, sequence-major) and the cache.
///
/// All sequences in `batch` must have the same length `len <= seq_len`.
pub fn model_forward<S: AsRef<[usize]>>(
    state: &ModelState,
    batch: &[S],
    cfg: &ModelConfig,
    dropout: Dropout,
) -> Result<(Matrix, ForwardCache)> {
    let len = batch.first().map_or(0, |s| s.as_ref().len());
    if batch.is_empty() || len == 0 || len > cfg.seq_len {
        return Err(Error::InvalidConfig(format!(
            "batch needs sequences of length 1..={}, got {len}",
            cfg.seq_len
        )));
    }
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let mut ids = Vec::with_capacity(batch.len() * len);
    for seq in batch {
        let seq = seq.as_ref();
        if seq.len() != len {
            return Err(Error::InvalidConfig("ragged batch".into()));
        }
        for &id in seq {
            if id >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
            ids.push(id);
        }
    }
    let n = ids.len();
    let mut x = Matrix::zeros((n, d));
    for (r, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(r);
        row += &state.tok_emb.row(id);
        row += &state.pos_emb.row(r % len);
    }

    let mut rng = match dropout {
        Dropout::Seeded(seed) if cfg.dropout_rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };

    let mut layers = Vec::with_capacity(state.layers.len());
    for p in &state.layers {
        let (h1, ln1) = layer_norm(&x, &p.ln1_gain, &p.ln1_bias);
        let q = h1.dot(&p.w_q);
        let k = h1.dot(&p.w_k);
        let v = h1.dot(&p.w_v);
        let mut concat = Matrix::zeros((n, d));
        let mut weights = Vec::with_capacity(batch.len() * cfg.num_heads);
        for b in 0..batch.len() {
            let r = b * len..(b + 1) * len;
            for h in 0..cfg.num_heads {
                let c = h * hd..(h + 1) * hd;
                let out = attention_forward(
                    &q.slice(s![r.clone(), c.clone()]),
                    &k.slice(s![r.clone(), c.clone()]),
                    &v.slice(s![r.clone(), c.clone()]),
                    cfg.causal,
                )?;
                concat.slice_mut(s![r.clone(), c]).assign(&out.out);
                weights.push(out.weights);
            }
        }
        let mut attn = concat.dot(&p.w_o);
        let mask_attn = rng
            .as_mut()
            .map(|g| dropout_mask(g, (n, d), cfg.dropout_rate));
        if let Some(m) = &mask_attn {
            attn *= m;
        }
        x += &attn;

        let (h2, ln2) = layer_norm(&x, &p.ln2_gain, &p.ln2_bias);
        let ff_pre = h2.dot(&p.w_ff1) + &p.b_ff1;
        let ff_cdf = ff_pre.mapv(normal_cdf);
        let mut ff_act = &ff_pre * &ff_cdf;
        let mask_ff = rng
            .as_mut()
            .map(|g| dropout_mask(g, ff_act.dim(), cfg.dropout_rate));
        if let Some(m) = &mask_ff {
            ff_act *= m;
        }
        x += &(ff_act.dot(&p.w_ff2) + &p.b_ff2);

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            weights,
            concat,
            mask_attn,
            ln2,
            h2,
            ff_pre,
            ff_cdf,
            ff_act,
            mask_ff,
        });
    }
    let (hf, lnf) = layer_norm(&x, &state.lnf_gain, &state.lnf_bias);
    let logits = hf.dot(&state.w_out);
    Ok((
        logits,
        ForwardCache {
            ids,
            batch: batch.len(),
            len,
            layers,
            lnf,
            hf,
        },
    ))
}

/// Mean cross-entropy over all rows and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.nrows() != targets.len() {
        return Err(crate::error::mismatch(
            "cross_entropy",
            format!("{} rows vs {} targets", logits.nrows(), targets.len()),
        ));
    }
    let n = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.dim());
    let mut loss = 0.0;
    for ((row, mut g), &t) in logits
        .axis_iter(Axis(0))
        .zip(grad.axis_iter_mut(Axis(0)))
        .zip(targets)
    {
        if t >= row.len() {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab_size: row.len(),
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (gi, &l) in g.iter_mut().zip(row.iter()) {
            *gi = (l - max).exp();
            sum += *gi;
        }
        loss += sum.ln() + max - row[t];
        g /= sum * n;
        g[t] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Parameter gradients for `d_logits`, using the configured attention gradient method.
pub fn model_backward(
    state: &ModelState,
    cache: &ForwardCache,
    d_logits: &Matrix,
    cfg: &ModelConfig,
) -> Result<ModelState> {
    let mut grads = state.zeros_like();
    let len = cache.len;
    let hd = cfg.head_dim();

    grads.w_out = cache.hf.t().dot(d_logits);
    let d_hf = d_logits.dot(&state.w_out.t());
    let mut dx = layer_norm_backward(
        &d_hf,
        &cache.lnf,
        &state.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
    );

    for (l, (p, c)) in state.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[l];

        // Feed-forward sub-block.
        g.b_ff2 += &dx.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.w_ff2 += &c.ff_act.t().dot(&dx);
        let mut d_act = dx.dot(&p.w_ff2.t());
        if let Some(m) = &c.mask_ff {
            d_act *= m;
        }
        Zip::from(&mut d_act)
            .and(&c.ff_pre)
            .and(&c.ff_cdf)
            .for_each(|g, &x, &cdf| *g *= gelu_grad(x, cdf));
        g.b_ff1 += &d_act.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.w_ff1 += &c.h2.t().dot(&d_act);
        let d_h2 = d_act.dot(&p.w_ff1.t());
        dx += &layer_norm_backward(&d_h2, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

        // Attention sub-block.
        let mut d_attn = dx.clone();
        if let Some(m) = &c.mask_attn {
            d_attn *= m;
        }
        g.w_o += &c.concat.t().dot(&d_attn);
        let d_concat = d_attn.dot(&p.w_o.t());
        let mut dq = Matrix::zeros(c.q.dim());
        let mut dk = Matrix::zeros(c.k.dim());
        let mut dv = Matrix::zeros(c.v.dim());
        for b in 0..cache.batch {
            let r = b * len..(b + 1) * len;
            for h in 0..cfg.num_heads {
                let cols = h * hd..(h + 1) * hd;
                let (gq, gk, gv) = attention_backward(
                    &c.q.slice(s![r.clone(), cols.clone()]),
                    &c.k.slice(s![r.clone(), cols.clone()]),
                    &c.v.slice(s![r.clone(), cols.clone()]),
                    &c.weights[b * cfg.num_heads + h].view(),
                    &d_concat.slice(s![r.clone(), cols.clone()]),
                    &cfg.grad,
                    cfg.causal,
                )?;
                dq.slice_mut(s![r.clone(), cols.clone()]).assign(&gq);
                dk.slice_mut(s![r.clone(), cols.clone()]).assign(&gk);
                dv.slice_mut(s![r.clone(), cols.clone()]).assign(&gv);
            }
        }
        g.w_q += &c.h1.t().dot(&dq);
        g.w_k += &c.h1.t().dot(&dk);
        g.w_v += &c.h1.t().dot(&dv);
        let d_h1 = dq.dot(&p.w_q.t()) + dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
        dx += &layer_norm_backward(&d_h1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    }

    for (r, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(r);
        let mut t = grads.tok_emb.row_mut(id);
        t += &row;
        let mut pe = grads.pos_emb.row_mut(r % len);
        pe += &row;
    }
    Ok(grads)
}

/// Loss and parameter gradients for a batch of `(input, target)` windows.
pub fn loss_and_grads<S: AsRef<[usize]>>(
    state: &ModelState,
    inputs: &[S],
    targets: &[usize],
    cfg: &ModelConfig,
    dropout: Dropout,
) -> Result<(f64, ModelState)> {
    let (logits, cache) = model_forward(state, inputs, cfg, dropout)?;
    let (loss, d_logits) = cross_entropy(&logits, targets)?;
    let grads = model_backward(state, &cache, &d_logits, cfg)?;
    Ok((loss, grads))
}

/// Mean next-token loss without dropout.
pub fn loss<S: AsRef<[usize]>>(
    state: &ModelState,
    inputs: &[S],
    targets: &[usize],
    cfg: &ModelConfig,
) -> Result<f64> {
    let (logits, _) = model_forward(state, inputs, cfg, Dropout::Off)?;
    Ok(cross_entropy(&logits, targets)?.0)
}

/// Greedy continuation of `prompt` (smoke test for a trained model).
pub fn greedy_generate(
    state: &ModelState,
    cfg: &ModelConfig,
    prompt: &[usize],
    steps: usize,
) -> Result<Vec<usize>> {
    let mut out = prompt.to_vec();
    for _ in 0..steps {
        let start = out.len().saturating_sub(cfg.seq_len);
        let ctx = &out[start..];
        let (logits, _) = model_forward(state, &[ctx], cfg, Dropout::Off)?;
        let last = logits.row(logits.nrows() - 1);
        let next = last
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        out.push(next);
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "spangrad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Writes a JSON checkpoint: config header plus named row-major tensors.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, state: &ModelState) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        tensors: state
            .tensors()
            .into_iter()
            .map(|(name, m)| TensorRecord {
                name,
                shape: [m.nrows(), m.ncols()],
                data: m.iter().cloned().collect(),
            })
            .collect(),
    };
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelState)> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let file: CheckpointFile = serde_json::from_reader(r)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    file.config.validate()?;
    let mut state = ModelState::zeros(&file.config);
    let mut slots = state.tensors_mut();
    if slots.len() != file.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            slots.len(),
            file.tensors.len()
        )));
    }
    for ((name, slot), rec) in slots.iter_mut().zip(file.tensors) {
        if *name != rec.name || slot.dim() != (rec.shape[0], rec.shape[1]) {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                rec.name,
                rec.shape,
                name,
                slot.dim()
            )));
        }
        **slot = crate::linalg::dense(rec.shape[0], rec.shape[1], rec.data)?;
    }
    drop(slots);
    Ok((file.config, state))
}

/// Attention weights of one head as a view, for diagnostics.
pub fn head_weights<'a>(
    cache: &'a ForwardCache,
    layer: usize,
    seq: usize,
    head: usize,
    num_heads: usize,
) -> ArrayView2<'a, f64> {
    cache.layers[layer].weights[seq * num_heads + head].view()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::new(8, 8, 2, 2);
        cfg.vocab_size = 16;
        cfg.dropout_rate = 0.0;
        cfg
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let cfg = tiny();
        let state = ModelState::zeros(&cfg);
        let seq = [1usize, 2, 3, 4, 5];
        let (logits, _) = model_forward(&state, &[seq], &cfg, Dropout::Off).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let l = loss(&state, &[seq], &[2, 3, 4, 5, 6], &cfg).unwrap();
        assert!((l - (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut cfg = tiny();
        let state = ModelState::init(&cfg, 3).unwrap();
        let seq = [1usize, 7, 3, 9];
        let a = model_forward(&state, &[seq], &cfg, Dropout::Off).unwrap().0;
        let b = model_forward(&state, &[seq], &cfg, Dropout::Off).unwrap().0;
        assert_eq!(a, b);
        cfg.dropout_rate = 0.3;
        let a = model_forward(&state, &[seq], &cfg, Dropout::Seeded(5))
            .unwrap()
            .0;
        let b = model_forward(&state, &[seq], &cfg, Dropout::Seeded(5))
            .unwrap()
            .0;
        let c = model_forward(&state, &[seq], &cfg, Dropout::Seeded(6))
            .unwrap()
            .0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_tokens_and_configs() {
        let cfg = tiny();
        let state = ModelState::zeros(&cfg);
        assert!(matches!(
            model_forward(&state, &[[1usize, 16]], &cfg, Dropout::Off),
            Err(Error::TokenOutOfRange { id: 16, .. })
        ));
        let mut bad = tiny();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = tiny();
        bad.dropout_rate = 1.0;
        assert!(bad.validate().is_err());
        let mut warn = tiny();
        warn.seq_len = 2;
        assert_eq!(warn.warnings().len(), 1);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny();
        let state = ModelState::init(&cfg, 1).unwrap();
        let seq = [3usize, 1, 4, 1, 5, 9];
        let (logits, cache) = model_forward(&state, &[seq], &cfg, Dropout::Off).unwrap();
        let g = model_backward(&state, &cache, &Matrix::zeros(logits.dim()), &cfg).unwrap();
        assert!(g.tensors().iter().all(|(_, m)| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unused_token_rows_get_no_gradient() {
        let cfg = tiny();
        let state = ModelState::init(&cfg, 2).unwrap();
        let (_, g) = loss_and_grads(
            &state,
            &[[3usize, 1, 4, 1]],
            &[1, 4, 1, 5],
            &cfg,
            Dropout::Off,
        )
        .unwrap();
        for id in 0..cfg.vocab_size {
            let used = [3, 1, 4].contains(&id);
            let zero = g.tok_emb.row(id).iter().all(|&v| v == 0.0);
            assert_eq!(zero, !used, "token {id}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let state = ModelState::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &cfg, &state).unwrap();
        let (cfg2, state2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(state, state2);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let logits = crate::linalg::from_rows(&[[0.1, 2.0, -1.0], [0.0, 0.0, 0.0]]).unwrap();
        let (l, g) = cross_entropy(&logits, &[1, 2]).unwrap();
        assert!(l > 0.0);
        for row in g.axis_iter(Axis(0)) {
            assert!(row.sum().abs() < 1e-15);
        }
    }
}
