//! Invariant suites, finite-difference gradient audits and decomposition dumps.
//!
//! Every suite returns an [`AuditReport`]: a list of named checks with the
//! measured value next to its tolerance. Inputs are drawn from a seeded
//! ChaCha8 stream, so the same seed reproduces the same measurements.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_causal_mask, attention_backward, attention_forward, softmax_rows, GradConfig, GradMethod,
};
use crate::error::{Error, Result};
use crate::grad::{
    block_gradients, combine_scaled, grad_k_by_order, grad_q_by_order, grad_reductionistic,
    grad_score_routed, grad_simplest, grad_standard, grad_unidirectional_parts, grad_v,
    reductionistic_projectors, routed_block_gradients, score_decomposition_grads, BlockGradMode,
    QKVModulation, ScaleConfig, SimplestScales, CROSS_PAIRS,
};
use crate::linalg::{
    frobenius, frobenius_distance, projector, projector_with_pinv, pseudoinverse_matrix, Matrix,
    ProjectorPair, RegularizationPolicy, SpanSource,
};
use crate::model::{loss, loss_and_grads, Dropout, ModelConfig, ModelState};
use crate::scores::{
    block_norms, decompose_bidirectional, is_exception_pair, orthogonality_table, score,
    split_unidirectional, vanishing_block_check, ScoreBlocks, BLOCKS_BY_ORDER, BLOCK_FACTORS,
    NUM_BLOCKS, NUM_ORDERS, ORDER_OF,
};
use crate::train::mix_seed;

/// Default tolerances. `--tol` replaces all of them at once.
pub mod tolerance {
    pub const PROJECTOR: f64 = 1e-10;
    /// Scaled by `T`.
    pub const COMPLEMENT: f64 = 1e-12;
    pub const BLOCK_SUM: f64 = 1e-10;
    pub const VANISHING: f64 = 1e-10;
    pub const ORTHOGONALITY: f64 = 1e-9;
    pub const ROUTED_UNIT: f64 = 1e-9;
    pub const REDUCTIONISTIC_UNIT: f64 = 1e-10;
    pub const SIMPLEST_UNIT: f64 = 1e-12;
    pub const UNIDIRECTIONAL_UNIT: f64 = 1e-10;
    pub const FINITE_DIFFERENCE: f64 = 1e-6;
    /// Surrogates that are linear in the perturbed input.
    pub const FINITE_DIFFERENCE_LINEAR: f64 = 1e-7;
    pub const MODEL_FINITE_DIFFERENCE: f64 = 1e-5;
}

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `measured <= tolerance`.
    AtMost,
    /// `measured == tolerance` exactly.
    Equals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub measured: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub pass: bool,
}

impl Check {
    pub fn at_most(id: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            id: id.into(),
            measured,
            tolerance,
            comparison: Comparison::AtMost,
            // NaN fails.
            pass: measured <= tolerance,
        }
    }

    pub fn equals(id: impl Into<String>, measured: f64, expected: f64) -> Self {
        Self {
            id: id.into(),
            measured,
            tolerance: expected,
            comparison: Comparison::Equals,
            pass: measured == expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub suite: String,
    pub seed: u64,
    pub seq_len: usize,
    pub head_dim: usize,
    pub checks: Vec<Check>,
    /// Diagnostic values that carry no verdict.
    pub observations: Vec<Observation>,
    pub overall: bool,
    pub elapsed_ms: f64,
}

impl AuditReport {
    fn new(suite: impl Into<String>, seed: u64, seq_len: usize, head_dim: usize) -> Self {
        Self {
            suite: suite.into(),
            seed,
            seq_len,
            head_dim,
            checks: Vec::new(),
            observations: Vec::new(),
            overall: true,
            elapsed_ms: 0.0,
        }
    }

    fn observe(&mut self, name: impl Into<String>, value: f64) {
        self.observations.push(Observation {
            name: name.into(),
            value,
        });
    }

    fn finish(mut self, start: Instant) -> Self {
        self.overall = self.checks.iter().all(|c| c.pass);
        self.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        self
    }

    /// Concatenates reports, prefixing check ids with the source suite.
    pub fn merge(suite: impl Into<String>, reports: Vec<AuditReport>) -> Self {
        let first = reports.first();
        let mut out = Self::new(
            suite,
            first.map_or(0, |r| r.seed),
            first.map_or(0, |r| r.seq_len),
            first.map_or(0, |r| r.head_dim),
        );
        for r in reports {
            out.elapsed_ms += r.elapsed_ms;
            for mut c in r.checks {
                c.id = format!("{}/{}", r.suite, c.id);
                out.checks.push(c);
            }
            for mut o in r.observations {
                o.name = format!("{}/{}", r.suite, o.name);
                out.observations.push(o);
            }
        }
        out.overall = out.checks.iter().all(|c| c.pass);
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "suite {} (seed {}, T={}, d={})",
            self.suite, self.seed, self.seq_len, self.head_dim
        )?;
        let width = self.checks.iter().map(|c| c.id.len()).max().unwrap_or(0);
        for c in &self.checks {
            let op = match c.comparison {
                Comparison::AtMost => "<=",
                Comparison::Equals => "==",
            };
            writeln!(
                f,
                "  {} {:<width$}  {:>11.3e} {op} {:.1e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.id,
                c.measured,
                c.tolerance,
            )?;
        }
        for o in &self.observations {
            writeln!(f, "  info {:<width$}  {:>11.3e}", o.name, o.value)?;
        }
        write!(
            f,
            "{}: {}/{} checks passed in {:.1} ms",
            if self.overall { "PASS" } else { "FAIL" },
            self.checks.iter().filter(|c| c.pass).count(),
            self.checks.len(),
            self.elapsed_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Projector,
    BlockSum,
    Orthogonality,
    Vanishing,
    Reconstruction,
    Gradcheck,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Projector,
        Suite::BlockSum,
        Suite::Orthogonality,
        Suite::Vanishing,
        Suite::Reconstruction,
        Suite::Gradcheck,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Projector => "projector",
            Self::BlockSum => "block_sum",
            Self::Orthogonality => "orthogonality",
            Self::Vanishing => "vanishing",
            Self::Reconstruction => "reconstruction",
            Self::Gradcheck => "gradcheck",
        }
    }

    /// `all` or a comma-separated list of suite names.
    pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projector" | "projectors" => Ok(Self::Projector),
            "block_sum" | "block-sum" | "blocks" => Ok(Self::BlockSum),
            "orthogonality" => Ok(Self::Orthogonality),
            "vanishing" => Ok(Self::Vanishing),
            "reconstruction" => Ok(Self::Reconstruction),
            "gradcheck" | "fd" => Ok(Self::Gradcheck),
            _ => Err(Error::InvalidConfig(format!(
                "unknown suite `{s}` (expected all, projector, block_sum, orthogonality, vanishing, reconstruction or gradcheck)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyParams {
    pub seed: u64,
    pub seq_len: usize,
    pub head_dim: usize,
    /// Seeded instances per suite; the worst measurement is reported.
    pub instances: usize,
    /// Overrides every default tolerance.
    pub tol: Option<f64>,
    /// Central-difference step.
    pub step: f64,
}

impl VerifyParams {
    pub fn new(seed: u64, seq_len: usize, head_dim: usize) -> Self {
        Self {
            seed,
            seq_len,
            head_dim,
            instances: 10,
            tol: None,
            step: DEFAULT_STEP,
        }
    }

    fn tol(&self, default: f64) -> f64 {
        self.tol.unwrap_or(default)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.seq_len < self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= d <= T for full-column-rank inputs, got T={}, d={}",
                self.seq_len, self.head_dim
            )));
        }
        if self.instances == 0 {
            return Err(Error::InvalidConfig("instances must be positive".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "finite-difference step must be positive, got {}",
                self.step
            )));
        }
        Ok(())
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)`; zero when everything vanishes.
pub fn relative_error(a: &ArrayView2<f64>, b: &ArrayView2<f64>, floor: f64) -> f64 {
    let denom = frobenius(a).max(frobenius(b)).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        frobenius_distance(a, b) / denom
    }
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    relative_error(&a.view(), &b.view(), 0.0)
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

struct Inputs {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn inputs(seed: u64, instance: usize, t: usize, d: usize) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4155_4449, instance as u64));
    Inputs {
        q: random_matrix(&mut rng, t, d),
        k: random_matrix(&mut rng, t, d),
        v: random_matrix(&mut rng, t, d),
    }
}

/// Runs `instance` for every seeded instance and keeps the worst value per check.
fn worst_over_instances(
    params: &VerifyParams,
    mut instance: impl FnMut(usize) -> Result<Vec<Check>>,
    report: &mut AuditReport,
) -> Result<()> {
    let mut acc: Vec<Check> = Vec::new();
    for i in 0..params.instances {
        let checks = instance(i)?;
        if acc.is_empty() {
            acc = checks;
            continue;
        }
        for (a, c) in acc.iter_mut().zip(checks) {
            debug_assert_eq!(a.id, c.id);
            match a.comparison {
                Comparison::AtMost => {
                    // NaN replaces anything, so a broken instance is never hidden.
                    if c.measured > a.measured || c.measured.is_nan() {
                        *a = c;
                    }
                }
                Comparison::Equals => {
                    if a.pass && !c.pass {
                        *a = c;
                    }
                }
            }
        }
    }
    report.checks.extend(acc);
    Ok(())
}

pub fn run_suite(suite: Suite, params: &VerifyParams) -> Result<AuditReport> {
    params.validate()?;
    match suite {
        Suite::Projector => projector_suite(params),
        Suite::BlockSum => block_sum_suite(params),
        Suite::Orthogonality => orthogonality_suite(params),
        Suite::Vanishing => vanishing_suite(params),
        Suite::Reconstruction => reconstruction_suite(params),
        Suite::Gradcheck => gradcheck_suite(params),
    }
}

/// Runs the selected suites; a single suite keeps its own name.
pub fn verify(suites: &[Suite], params: &VerifyParams) -> Result<AuditReport> {
    let reports = suites
        .iter()
        .map(|s| run_suite(*s, params))
        .collect::<Result<Vec<_>>>()?;
    if reports.len() == 1 {
        return Ok(reports.into_iter().next().expect("one report"));
    }
    let name = if suites == Suite::ALL {
        "all"
    } else {
        "selection"
    };
    Ok(AuditReport::merge(name, reports))
}

/// Idempotency, symmetry, complementarity, absorption and pseudoinverse
/// consistency for one matrix.
pub fn projector_checks(m: &Matrix, prefix: &str, tol: Option<f64>) -> Result<(Vec<Check>, f64)> {
    let t = m.nrows();
    let d = m.ncols();
    let (pair, pinv) =
        projector_with_pinv(&m.view(), &RegularizationPolicy::exact(), SpanSource::K)?;
    let p = &pair.parallel;
    let pp = &pair.orthogonal;
    let pt = tol.unwrap_or(tolerance::PROJECTOR);
    let p_norm = frobenius(&p.view());
    let m_norm = frobenius(&m.view());
    let eye_t = Matrix::eye(t);
    let eye_d = Matrix::eye(d);
    let idempotency = frobenius_distance(&p.dot(p).view(), &p.view()) / p_norm.max(1.0);
    let symmetry = frobenius_distance(&p.view(), &p.t()) / p_norm;
    let complement = frobenius_distance(&(p + pp).view(), &eye_t.view()) / t as f64;
    let absorbed = frobenius_distance(&p.dot(m).view(), &m.view()) / m_norm;
    let annihilated = frobenius(&pp.dot(m).view()) / m_norm;
    let left_inverse = frobenius_distance(&pinv.matrix.dot(m).view(), &eye_d.view()) / d as f64;
    // trace(Π⊥) = T - rank for an orthogonal projector.
    let trace_gap = (pp.diag().sum() - (t - pair.source_rank) as f64).abs() / t as f64;
    let perp_norm = frobenius(&pp.view());
    Ok((
        vec![
            Check::at_most(format!("{prefix}idempotency"), idempotency, pt),
            Check::at_most(format!("{prefix}symmetry"), symmetry, pt),
            Check::at_most(
                format!("{prefix}complementarity"),
                complement,
                tol.unwrap_or(tolerance::COMPLEMENT),
            ),
            Check::at_most(format!("{prefix}absorption_parallel"), absorbed, pt),
            Check::at_most(format!("{prefix}absorption_orthogonal"), annihilated, pt),
            Check::at_most(
                format!("{prefix}pseudoinverse_left_inverse"),
                left_inverse,
                pt,
            ),
            Check::at_most(format!("{prefix}complement_trace"), trace_gap, pt),
        ],
        perp_norm,
    ))
}

fn projector_suite(params: &VerifyParams) -> Result<AuditReport> {
    let start = Instant::now();
    let mut report = AuditReport::new("projector", params.seed, params.seq_len, params.head_dim);
    let mut perp = [0.0f64; 2];
    worst_over_instances(
        params,
        |i| {
            let x = inputs(params.seed, i, params.seq_len, params.head_dim);
            let (mut checks, pk) = projector_checks(&x.k, "k_", params.tol)?;
            let (vchecks, pv) = projector_checks(&x.v, "v_", params.tol)?;
            checks.extend(vchecks);
            perp[0] = perp[0].max(pk);
            perp[1] = perp[1].max(pv);
            Ok(checks)
        },
        &mut report,
    )?;
    report.observe("k_orthogonal_frobenius", perp[0]);
    report.observe("v_orthogonal_frobenius", perp[1]);
    Ok(report.finish(start))
}

fn exact_pairs(x: &Inputs) -> Result<(ProjectorPair, ProjectorPair)> {
    let policy = RegularizationPolicy::exact();
    Ok((
        projector(&x.k.view(), &policy, SpanSource::K)?,
        projector(&x.v.view(), &policy, SpanSource::V)?,
    ))
}

fn block_sum_suite(params: &VerifyParams) -> Result<AuditReport> {
    let start = Instant::now();
    let mut report = AuditReport::new("block_sum", params.seed, params.seq_len, params.head_dim);
    let tol = params.tol(tolerance::BLOCK_SUM);
    worst_over_instances(
        params,
        |i| {
            let x = inputs(params.seed, i, params.seq_len, params.head_dim);
            let (pk, pv) = exact_pairs(&x)?;
            let s = score(&x.q.view(), &x.k.view())?;
            let blocks = decompose_bidirectional(&x.q.view(), &x.k.view(), &pk, &pv)?;
            let split = split_unidirectional(&s.view(), &pk)?;
            Ok(vec![
                Check::at_most("eight_block_sum", rel(&blocks.sum(), &s), tol),
                Check::at_most(
                    "unidirectional_sum",
                    rel(&(&split.s_parallel + &split.s_orthogonal), &s),
                    tol,
                ),
            ])
        },
        &mut report,
    )?;
    Ok(report.finish(start))
}

/// `|⟨S^A, S^B⟩| / ‖S‖²` for `A < B`, 1-based.
pub fn pair_couplings(blocks: &ScoreBlocks) -> Vec<((usize, usize), f64)> {
    let table = orthogonality_table(blocks);
    // The table sums to the squared norm of the score.
    let total = table.sum().abs();
    let mut out = Vec::new();
    for a in 0..NUM_BLOCKS {
        for b in (a + 1)..NUM_BLOCKS {
            let c = if total > 0.0 {
                table[[a, b]].abs() / total
            } else {
                0.0
            };
            out.push(((a + 1, b + 1), c));
        }
    }
    out
}

fn orthogonality_suite(params: &VerifyParams) -> Result<AuditReport> {
    let start = Instant::now();
    let mut report = AuditReport::new(
        "orthogonality",
        params.seed,
        params.seq_len,
        params.head_dim,
    );
    let tol = params.tol(tolerance::ORTHOGONALITY);
    let mut first: Option<Vec<((usize, usize), f64)>> = None;
    worst_over_instances(
        params,
        |i| {
            let x = inputs(params.seed, i, params.seq_len, params.head_dim);
            let (pk, pv) = exact_pairs(&x)?;
            let blocks = decompose_bidirectional(&x.q.view(), &x.k.view(), &pk, &pv)?;
            let couplings = pair_couplings(&blocks);
            let worst = couplings
                .iter()
                .filter(|((a, b), _)| !is_exception_pair(*a, *b))
                .fold(0.0f64, |m, (_, c)| m.max(*c));
            let nonzero: Vec<(usize, usize)> = couplings
                .iter()
                .filter(|(_, c)| *c > tol)
                .map(|(p, _)| *p)
                .collect();
            let only_exceptions = nonzero.iter().all(|(a, b)| is_exception_pair(*a, *b));
            first.get_or_insert(couplings);
            Ok(vec![
                Check::at_most("max_non_exception_coupling", worst, tol),
                // A full-rank K or V leaves no orthogonal complement to couple.
                Check::equals(
                    "nonzero_pairs",
                    nonzero.len() as f64,
                    if params.head_dim < params.seq_len {
                        4.0
                    } else {
                        0.0
                    },
                ),
                Check::equals(
                    "nonzero_pairs_are_exceptions",
                    only_exceptions as u8 as f64,
                    1.0,
                ),
            ])
        },
        &mut report,
    )?;
    for ((a, b), c) in first.unwrap_or_default() {
        if is_exception_pair(a, b) {
            report.observe(format!("coupling_{a}_{b}"), c);
        }
    }
    Ok(report.finish(start))
}

fn vanishing_suite(params: &VerifyParams) -> Result<AuditReport> {
    let start = Instant::now();
    let mut report = AuditReport::new("vanishing", params.seed, params.seq_len, params.head_dim);
    let tol = params.tol(tolerance::VANISHING);
    worst_over_instances(
        params,
        |i| {
            let x = inputs(params.seed, i, params.seq_len, params.head_dim);
            let (pk, pv) = exact_pairs(&x)?;
            let s = score(&x.q.view(), &x.k.view())?;
            let worst = vanishing_block_check(&x.q.view(), &x.k.view(), &pk, &pv)?;
            Ok(vec![Check::at_most(
                "max_omitted_component",
                worst / frobenius(&s.view()),
                tol,
            )])
        },
        &mut report,
    )?;
    Ok(report.finish(start))
}

/// Forward pass of one causal head plus a random upstream gradient.
struct HeadCase {
    x: Inputs,
    weights: Matrix,
    d_out: Matrix,
}

fn head_case(seed: u64, instance: usize, t: usize, d: usize) -> Result<HeadCase> {
    let x = inputs(seed, instance, t, d);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5550_5354, instance as u64));
    let d_out = random_matrix(&mut rng, t, d);
    let weights = attention_forward(&x.q.view(), &x.k.view(), &x.v.view(), true)?.weights;
    Ok(HeadCase { x, weights, d_out })
}

impl HeadCase {
    fn backward(&self, cfg: &GradConfig) -> Result<(Matrix, Matrix, Matrix)> {
        attention_backward(
            &self.x.q.view(),
            &self.x.k.view(),
            &self.x.v.view(),
            &self.weights.view(),
            &self.d_out.view(),
            cfg,
            true,
        )
    }
}

fn exact_config(method: GradMethod) -> GradConfig {
    GradConfig {
        method,
        regularization: RegularizationPolicy::exact(),
        ..GradConfig::default()
    }
}

fn reconstruction_suite(params: &VerifyParams) -> Result<AuditReport> {
    let start = Instant::now();
    let mut report = AuditReport::new(
        "reconstruction",
        params.seed,
        params.seq_len,
        params.head_dim,
    );
    worst_over_instances(
        params,
        |i| {
            let case = head_case(params.seed, i, params.seq_len, params.head_dim)?;
            let (dq0, dk0, dv0) = case.backward(&GradConfig::standard())?;
            let mut checks = Vec::new();

            let routed = exact_config(GradMethod::ScoreDecomposition);
            let (dq, dk, dv) = case.backward(&routed)?;
            let t_routed = params.tol(tolerance::ROUTED_UNIT);
            checks.push(Check::at_most("routed_unit_dq", rel(&dq, &dq0), t_routed));
            checks.push(Check::at_most("routed_unit_dk", rel(&dk, &dk0), t_routed));
            checks.push(Check::equals(
                "routed_unit_dv_max_diff",
                max_abs(&(&dv - &dv0)),
                0.0,
            ));

            // The explicit per-order pipeline with routed block gradients.
            let policy = RegularizationPolicy::exact();
            let (pk, kplus) = projector_with_pinv(&case.x.k.view(), &policy, SpanSource::K)?;
            let pv = projector(&case.x.v.view(), &policy, SpanSource::V)?;
            let ds = crate::attention::softmax_backward(
                &case.weights.view(),
                &case.d_out.dot(&case.x.v.t()).view(),
            );
            let bundle = score_decomposition_grads(
                &routed_block_gradients(&ds.view()),
                &case.x.q.view(),
                &case.x.k.view(),
                &pk,
                &pv,
                &kplus,
                dv0.clone(),
                &ScaleConfig::UNIT,
            )?;
            checks.push(Check::at_most(
                "block_pipeline_unit_dq",
                rel(&bundle.scaled_dq, &dq0),
                t_routed,
            ));
            checks.push(Check::at_most(
                "block_pipeline_unit_dk",
                rel(&bundle.scaled_dk, &dk0),
                t_routed,
            ));

            let zero = GradConfig {
                scales: ScaleConfig::ZERO,
                ..routed
            };
            let (dq, dk, dv) = case.backward(&zero)?;
            checks.push(Check::equals("zero_scales_max_abs_dq", max_abs(&dq), 0.0));
            checks.push(Check::equals("zero_scales_max_abs_dk", max_abs(&dk), 0.0));
            checks.push(Check::equals(
                "zero_scales_dv_max_diff",
                max_abs(&(&dv - &dv0)),
                0.0,
            ));
            let (vq, vk, vv) = case.backward(&GradConfig::modulated(QKVModulation::V_ONLY))?;
            let same = vq == dq && vk == dk && vv == dv;
            checks.push(Check::equals(
                "zero_scales_equal_v_only",
                same as u8 as f64,
                1.0,
            ));

            let (dq, dk, _) = case.backward(&exact_config(GradMethod::Reductionistic))?;
            let t_red = params.tol(tolerance::REDUCTIONISTIC_UNIT);
            checks.push(Check::at_most(
                "reductionistic_unit_dq",
                rel(&dq, &dq0),
                t_red,
            ));
            checks.push(Check::at_most(
                "reductionistic_unit_dk",
                rel(&dk, &dk0),
                t_red,
            ));

            let (dq, dk, _) = case.backward(&exact_config(GradMethod::Simplest))?;
            let t_simple = params.tol(tolerance::SIMPLEST_UNIT);
            checks.push(Check::at_most("simplest_unit_dq", rel(&dq, &dq0), t_simple));
            checks.push(Check::at_most("simplest_unit_dk", rel(&dk, &dk0), t_simple));

            let (dq, dk, _) = case.backward(&exact_config(GradMethod::Unidirectional))?;
            let t_uni = params.tol(tolerance::UNIDIRECTIONAL_UNIT);
            checks.push(Check::at_most(
                "unidirectional_unit_dq",
                rel(&dq, &dq0),
                t_uni,
            ));
            checks.push(Check::at_most(
                "unidirectional_unit_dk",
                rel(&dk, &dk0),
                t_uni,
            ));
            Ok(checks)
        },
        &mut report,
    )?;
    Ok(report.finish(start))
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn finite_difference(
    x: &Matrix,
    h: f64,
    mut f: impl FnMut(&Matrix) -> Result<f64>,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.dim());
    let mut probe = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = probe[[i, j]];
            probe[[i, j]] = orig + h;
            let fp = f(&probe)?;
            probe[[i, j]] = orig - h;
            let fm = f(&probe)?;
            probe[[i, j]] = orig;
            out[[i, j]] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(out)
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `S^B` with the left `Π_K` built from `k_left` and the explicit `K^T Π_K`
/// from `k_right`, every projector recomputed from scratch.
fn block_value(
    b: usize,
    q: &Matrix,
    k_left: &Matrix,
    k_right: &Matrix,
    v: &Matrix,
) -> Result<Matrix> {
    let policy = RegularizationPolicy::exact();
    let f = BLOCK_FACTORS[b - 1];
    let pk_left = projector(&k_left.view(), &policy, SpanSource::K)?;
    let pk_right = projector(&k_right.view(), &policy, SpanSource::K)?;
    let pv = projector(&v.view(), &policy, SpanSource::V)?;
    let c = 1.0 / (q.ncols() as f64).sqrt();
    let left = pv.part(f.left_v).dot(pk_left.part(f.left_k));
    let right = k_right.t().dot(&pk_right.parallel).dot(pv.part(f.right_v));
    Ok(left.dot(q).dot(&right) * c)
}

fn block_surrogate(
    blocks: &[usize],
    g: &[Matrix; NUM_BLOCKS],
    q: &Matrix,
    k_left: &Matrix,
    k_right: &Matrix,
    v: &Matrix,
) -> Result<f64> {
    let mut total = 0.0;
    for &b in blocks {
        total += inner(&g[b - 1], &block_value(b, q, k_left, k_right, v)?);
    }
    Ok(total)
}

/// One gradient audit: an analytic method against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckParams {
    pub method: GradMethod,
    pub scales: ScaleConfig,
    pub simplest: SimplestScales,
    pub mode: BlockGradMode,
    pub seed: u64,
    pub seq_len: usize,
    pub head_dim: usize,
    pub step: f64,
    pub tol: Option<f64>,
}

impl GradcheckParams {
    pub fn new(method: GradMethod, seed: u64, seq_len: usize, head_dim: usize) -> Self {
        Self {
            method,
            scales: ScaleConfig::new([1.0, 0.0, 0.0, 0.0]).expect("valid scales"),
            simplest: SimplestScales::default(),
            mode: BlockGradMode::Routed,
            seed,
            seq_len,
            head_dim,
            step: DEFAULT_STEP,
            tol: None,
        }
    }

    fn label(&self) -> String {
        match self.method {
            GradMethod::ScoreDecomposition => {
                let mode = match self.mode {
                    BlockGradMode::Routed => "routed",
                    BlockGradMode::PerBlockSoftmax => "perblock",
                };
                format!("gradcheck_score{}_{mode}", self.scales)
            }
            GradMethod::Reductionistic => format!("gradcheck_reductionistic{}", self.scales),
            m @ (GradMethod::Simplest | GradMethod::Unidirectional) => format!(
                "gradcheck_{m}[{},{}]",
                self.simplest.alpha_parallel, self.simplest.alpha_orthogonal
            ),
            GradMethod::Standard => "gradcheck_standard".into(),
        }
    }
}

/// Compares the selected gradient method against central differences of the
/// linear surrogate losses it is defined through.
///
/// Component errors use `‖a - b‖ / max(‖a‖, ‖b‖, 1e-3 ‖dQ_std‖)`, so a
/// component that vanishes analytically is judged against the size of the
/// full gradient instead of its own rounding noise.
pub fn gradcheck(p: &GradcheckParams) -> Result<AuditReport> {
    VerifyParams {
        instances: 1,
        ..VerifyParams::new(p.seed, p.seq_len, p.head_dim)
    }
    .validate()?;
    if !(p.step > 0.0 && p.step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "step must be positive, got {}",
            p.step
        )));
    }
    let start = Instant::now();
    let mut report = AuditReport::new(p.label(), p.seed, p.seq_len, p.head_dim);
    let (t, d, h) = (p.seq_len, p.head_dim, p.step);
    let case = head_case(p.seed, 0, t, d)?;
    let (q, k, v) = (&case.x.q, &case.x.k, &case.x.v);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, 0x4752_4144, 0));
    let g = random_matrix(&mut rng, t, t);
    let g2 = random_matrix(&mut rng, t, t);
    let c = 1.0 / (d as f64).sqrt();
    let policy = RegularizationPolicy::exact();
    let fd_tol = p.tol.unwrap_or(tolerance::FINITE_DIFFERENCE);
    let lin_tol = p.tol.unwrap_or(tolerance::FINITE_DIFFERENCE_LINEAR);

    let (std_q, std_k) = grad_standard(&g.view(), &q.view(), &k.view())?;
    let floor = 1e-3 * frobenius(&std_q.view()).max(frobenius(&std_k.view()));
    let err = |a: &Matrix, b: &Matrix| relative_error(&a.view(), &b.view(), floor);
    let score_loss = |g: &Matrix, q: &Matrix, k: &Matrix| inner(g, &(q.dot(&k.t()) * c));
    let fd_std_q = finite_difference(q, h, |q| Ok(score_loss(&g, q, k)))?;
    let fd_std_k = finite_difference(k, h, |k| Ok(score_loss(&g, q, k)))?;

    // dV through the masked softmax, common to every method.
    let (_, _, dv) = case.backward(&GradConfig {
        method: p.method,
        scales: p.scales,
        simplest: p.simplest,
        block_mode: p.mode,
        regularization: policy,
        ..GradConfig::default()
    })?;
    let mut s = q.dot(&k.t()) * c;
    apply_causal_mask(&mut s);
    let weights = softmax_rows(&s);
    let fd_v = finite_difference(v, h, |v| Ok(inner(&case.d_out, &weights.dot(v))))?;
    report
        .checks
        .push(Check::at_most("dv", rel(&dv, &fd_v), lin_tol));
    debug_assert_eq!(grad_v(&weights.view(), &case.d_out.view())?, dv);

    match p.method {
        GradMethod::Standard => {
            report
                .checks
                .push(Check::at_most("dq", err(&std_q, &fd_std_q), lin_tol));
            report
                .checks
                .push(Check::at_most("dk", err(&std_k, &fd_std_k), lin_tol));
        }
        GradMethod::Unidirectional => {
            let (pk, kplus) = projector_with_pinv(&k.view(), &policy, SpanSource::K)?;
            let parts = grad_unidirectional_parts(
                &g.view(),
                &g2.view(),
                &q.view(),
                &k.view(),
                &pk,
                &kplus,
            )?;
            let half = |gg: &Matrix, parallel: bool, q: &Matrix, k: &Matrix| -> Result<f64> {
                let pk = projector(&k.view(), &policy, SpanSource::K)?;
                Ok(inner(gg, &pk.part(parallel).dot(&(q.dot(&k.t()) * c))))
            };
            let fq_par = finite_difference(q, h, |q| half(&g, true, q, k))?;
            let fk_par = finite_difference(k, h, |k| half(&g, true, q, k))?;
            let fq_perp = finite_difference(q, h, |q| half(&g2, false, q, k))?;
            let fk_perp = finite_difference(k, h, |k| half(&g2, false, q, k))?;
            let checks = [
                ("parallel_dq", &parts.parallel.0, &fq_par),
                ("parallel_dk", &parts.parallel.1, &fk_par),
                ("orthogonal_dq", &parts.orthogonal.0, &fq_perp),
                ("orthogonal_dk", &parts.orthogonal.1, &fk_perp),
            ];
            for (id, a, b) in checks {
                report.checks.push(Check::at_most(id, err(a, b), fd_tol));
            }
            let (wq, wk) = parts.weighted(&p.simplest);
            let (a, b) = (p.simplest.alpha_parallel, p.simplest.alpha_orthogonal);
            report.checks.push(Check::at_most(
                "weighted_dq",
                err(&wq, &(&fq_par * a + &fq_perp * b)),
                fd_tol,
            ));
            report.checks.push(Check::at_most(
                "weighted_dk",
                err(&wk, &(&fk_par * a + &fk_perp * b)),
                fd_tol,
            ));
        }
        GradMethod::Simplest => {
            let pk = projector(&k.view(), &policy, SpanSource::K)?;
            let (dq, dk) = grad_simplest(&g.view(), &q.view(), &k.view(), &pk, &p.simplest)?;
            let m = &pk.parallel * p.simplest.alpha_parallel
                + &pk.orthogonal * p.simplest.alpha_orthogonal;
            report.checks.push(Check::at_most(
                "projected_dq",
                err(&dq, &m.dot(&fd_std_q)),
                lin_tol,
            ));
            report.checks.push(Check::at_most(
                "projected_dk",
                err(&dk, &m.dot(&fd_std_k)),
                lin_tol,
            ));
        }
        GradMethod::Reductionistic => {
            let pk = projector(&k.view(), &policy, SpanSource::K)?;
            let pv = projector(&v.view(), &policy, SpanSource::V)?;
            let projs = reductionistic_projectors(&pk, &pv)?;
            let (dq, dk) = grad_reductionistic(&g.view(), &q.view(), &k.view(), &projs, &p.scales)?;
            let mut m = Matrix::zeros((t, t));
            for (pi, a) in projs.iter().zip(p.scales.alpha) {
                m.scaled_add(a, pi);
            }
            report.checks.push(Check::at_most(
                "projected_dq",
                err(&dq, &m.dot(&fd_std_q)),
                lin_tol,
            ));
            report.checks.push(Check::at_most(
                "projected_dk",
                err(&dk, &m.dot(&fd_std_k)),
                lin_tol,
            ));
        }
        GradMethod::ScoreDecomposition => {
            score_gradcheck(p, &case, &g, floor, &mut report)?;
        }
    }
    Ok(report.finish(start))
}

fn score_gradcheck(
    p: &GradcheckParams,
    case: &HeadCase,
    g: &Matrix,
    floor: f64,
    report: &mut AuditReport,
) -> Result<()> {
    let (q, k, v) = (&case.x.q, &case.x.k, &case.x.v);
    let h = p.step;
    let policy = RegularizationPolicy::exact();
    let tol = p.tol.unwrap_or(tolerance::FINITE_DIFFERENCE);
    let err = |a: &Matrix, b: &Matrix| relative_error(&a.view(), &b.view(), floor);
    let (pk, kplus) = projector_with_pinv(&k.view(), &policy, SpanSource::K)?;
    let pv = projector(&v.view(), &policy, SpanSource::V)?;

    // Block gradients are frozen at the base point; the surrogates are linear in them.
    let block_grads: [Matrix; NUM_BLOCKS] = match p.mode {
        BlockGradMode::Routed => routed_block_gradients(&g.view()),
        BlockGradMode::PerBlockSoftmax => {
            let blocks = decompose_bidirectional(&q.view(), &k.view(), &pk, &pv)?;
            block_gradients(
                &blocks,
                &g.view(),
                &v.view(),
                &case.d_out.view(),
                BlockGradMode::PerBlockSoftmax,
                true,
            )?
        }
    };
    let dq_orders = grad_q_by_order(&block_grads, &pk, &pv, &k.view())?;
    let (direct, cross) = grad_k_by_order(&block_grads, &q.view(), &k.view(), &pk, &pv, &kplus)?;

    let mut fd_q: [Matrix; NUM_ORDERS] = std::array::from_fn(|_| Matrix::zeros(q.dim()));
    let mut fd_direct = fd_q.clone();
    let mut fd_cross = fd_q.clone();
    for (order, blocks) in BLOCKS_BY_ORDER.iter().enumerate() {
        fd_q[order] = finite_difference(q, h, |qq| {
            block_surrogate(blocks, &block_grads, qq, k, k, v)
        })?;
        fd_direct[order] = finite_difference(k, h, |kk| {
            block_surrogate(blocks, &block_grads, q, k, kk, v)
        })?;
        report.checks.push(Check::at_most(
            format!("q_order{order}"),
            err(&dq_orders[order], &fd_q[order]),
            tol,
        ));
        report.checks.push(Check::at_most(
            format!("k_direct_order{order}"),
            err(&direct[order], &fd_direct[order]),
            tol,
        ));
    }
    for order in 1..NUM_ORDERS {
        let blocks: Vec<usize> = CROSS_PAIRS
            .iter()
            .filter(|c| c.2 == order)
            .flat_map(|c| [c.0, c.1])
            .collect();
        fd_cross[order] = finite_difference(k, h, |kk| {
            block_surrogate(&blocks, &block_grads, q, kk, k, v)
        })?;
        report.checks.push(Check::at_most(
            format!("k_cross_order{order}"),
            err(&cross[order], &fd_cross[order]),
            tol,
        ));
    }

    let (sq, sk) = combine_scaled(&dq_orders, &direct, &cross, &p.scales);
    let (fq, fk) = combine_scaled(&fd_q, &fd_direct, &fd_cross, &p.scales);
    report
        .checks
        .push(Check::at_most("scaled_dq", err(&sq, &fq), tol));
    report
        .checks
        .push(Check::at_most("scaled_dk", err(&sk, &fk), tol));
    if p.mode == BlockGradMode::Routed {
        let kp = pseudoinverse_matrix(&k.view(), &policy)?;
        let vp = pseudoinverse_matrix(&v.view(), &policy)?;
        let (rq, rk) = grad_score_routed(
            &g.view(),
            &q.view(),
            &k.view(),
            &v.view(),
            &kp,
            &vp,
            &p.scales,
        )?;
        report
            .checks
            .push(Check::at_most("routed_fast_dq", err(&rq, &fq), tol));
        report
            .checks
            .push(Check::at_most("routed_fast_dk", err(&rk, &fk), tol));
    }
    for (order, dq) in dq_orders.iter().enumerate() {
        report.observations.push(Observation {
            name: format!("norm_q_order{order}"),
            value: frobenius(&dq.view()),
        });
    }
    Ok(())
}

/// Every parameter gradient of a one-layer, one-head model (standard method,
/// dropout off) against central differences of the loss.
pub fn model_gradcheck(
    seed: u64,
    seq_len: usize,
    model_dim: usize,
    step: f64,
    tol: Option<f64>,
) -> Result<AuditReport> {
    let start = Instant::now();
    let mut report = AuditReport::new("gradcheck_model", seed, seq_len, model_dim);
    let mut cfg = ModelConfig::new(seq_len, model_dim, 1, 1);
    cfg.vocab_size = 16;
    cfg.dropout_rate = 0.0;
    cfg.validate()?;
    let mut state = ModelState::init(&cfg, seed)?;
    // Larger attention weights keep the softmax away from uniform.
    for layer in &mut state.layers {
        layer.w_q *= 25.0;
        layer.w_k *= 25.0;
        layer.w_v *= 10.0;
    }
    state.w_out *= 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4d4f_4445, 0));
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2 {
        let seq: Vec<usize> = (0..=seq_len)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        inputs.push(seq[..seq_len].to_vec());
        targets.extend_from_slice(&seq[1..]);
    }
    let (_, grads) = loss_and_grads(&state, &inputs, &targets, &cfg, Dropout::Off)?;
    let analytic: Vec<(String, Matrix)> = grads
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    let global = analytic
        .iter()
        .map(|(_, m)| frobenius(&m.view()).powi(2))
        .sum::<f64>()
        .sqrt();
    let tol = tol.unwrap_or(tolerance::MODEL_FINITE_DIFFERENCE);
    let mut probe = state.clone();
    for (idx, (name, a)) in analytic.iter().enumerate() {
        let (rows, cols) = a.dim();
        let mut fd = Matrix::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                let orig = probe.tensors()[idx].1[[i, j]];
                probe.tensors_mut()[idx].1[[i, j]] = orig + step;
                let fp = loss(&probe, &inputs, &targets, &cfg)?;
                probe.tensors_mut()[idx].1[[i, j]] = orig - step;
                let fm = loss(&probe, &inputs, &targets, &cfg)?;
                probe.tensors_mut()[idx].1[[i, j]] = orig;
                fd[[i, j]] = (fp - fm) / (2.0 * step);
            }
        }
        let e = relative_error(&a.view(), &fd.view(), 1e-4 * global);
        report.checks.push(Check::at_most(name.clone(), e, tol));
    }
    Ok(report.finish(start))
}

fn gradcheck_suite(params: &VerifyParams) -> Result<AuditReport> {
    let start = Instant::now();
    let (seed, t, d) = (params.seed, params.seq_len, params.head_dim);
    let mut runs = Vec::new();
    let base = |method| GradcheckParams {
        step: params.step,
        tol: params.tol,
        ..GradcheckParams::new(method, seed, t, d)
    };
    runs.push(base(GradMethod::Standard));
    runs.push(GradcheckParams {
        simplest: SimplestScales::new(0.7, 0.2)?,
        ..base(GradMethod::Unidirectional)
    });
    runs.push(GradcheckParams {
        simplest: SimplestScales::new(0.7, 0.2)?,
        ..base(GradMethod::Simplest)
    });
    runs.push(GradcheckParams {
        scales: ScaleConfig::new([1.0, 0.5, 0.25, 2.0])?,
        ..base(GradMethod::Reductionistic)
    });
    for scales in [[1.0, 0.0, 0.0, 0.0], [0.7, 1.3, 0.2, 2.0]] {
        for mode in [BlockGradMode::Routed, BlockGradMode::PerBlockSoftmax] {
            runs.push(GradcheckParams {
                scales: ScaleConfig::new(scales)?,
                mode,
                ..base(GradMethod::ScoreDecomposition)
            });
        }
    }
    let mut reports = runs.iter().map(gradcheck).collect::<Result<Vec<_>>>()?;
    reports.push(model_gradcheck(seed, t, d, params.step, params.tol)?);
    let mut merged = AuditReport::merge("gradcheck", reports);
    merged.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(merged)
}

/// What `decompose` builds its inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    #[default]
    Random,
    /// `V = K`.
    Keys,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposeParams {
    pub seed: u64,
    pub seq_len: usize,
    pub head_dim: usize,
    pub values: ValueSource,
    pub zero_queries: bool,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub params: DecomposeParams,
    pub score: Matrix,
    pub blocks: ScoreBlocks,
    /// `‖S^B‖_F`, `B = 1..=8`.
    pub norms: Vec<f64>,
    pub table: Matrix,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionSummary {
    pub params: DecomposeParams,
    pub score_frobenius_sq: f64,
    pub block_frobenius_sq_sum: f64,
    /// Sum of all table entries; equals `‖S‖_F²`.
    pub table_sum: f64,
    /// Twice the exception-pair inner products.
    pub exception_cross_sum: f64,
    pub block_sum_relative_error: f64,
    pub order_frobenius_sq: [f64; NUM_ORDERS],
}

pub fn decompose(params: &DecomposeParams) -> Result<Decomposition> {
    VerifyParams {
        instances: 1,
        ..VerifyParams::new(params.seed, params.seq_len, params.head_dim)
    }
    .validate()?;
    let mut x = inputs(params.seed, 0, params.seq_len, params.head_dim);
    if params.values == ValueSource::Keys {
        x.v = x.k.clone();
    }
    if params.zero_queries {
        x.q.fill(0.0);
    }
    let (pk, pv) = exact_pairs(&x)?;
    let blocks = decompose_bidirectional(&x.q.view(), &x.k.view(), &pk, &pv)?;
    Ok(Decomposition {
        params: *params,
        score: score(&x.q.view(), &x.k.view())?,
        norms: block_norms(&blocks),
        table: orthogonality_table(&blocks),
        blocks,
    })
}

impl Decomposition {
    pub fn summary(&self) -> DecompositionSummary {
        let mut exception = 0.0;
        for a in 1..=NUM_BLOCKS {
            for b in 1..=NUM_BLOCKS {
                if is_exception_pair(a, b) {
                    exception += self.table[[a - 1, b - 1]];
                }
            }
        }
        let s_norm = frobenius(&self.score.view());
        DecompositionSummary {
            params: self.params,
            score_frobenius_sq: s_norm * s_norm,
            block_frobenius_sq_sum: self.norms.iter().map(|n| n * n).sum(),
            table_sum: self.table.sum(),
            exception_cross_sum: exception,
            block_sum_relative_error: if s_norm > 0.0 {
                frobenius_distance(&self.blocks.sum().view(), &self.score.view()) / s_norm
            } else {
                frobenius(&self.blocks.sum().view())
            },
            order_frobenius_sq: self.blocks.squared_norms_by_order(),
        }
    }

    /// `block_{B}.csv`, `block_norms.csv`, `order_norms.csv`,
    /// `inner_products.csv` and `summary.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, b) in self.blocks.blocks.iter().enumerate() {
            write_matrix_csv(&dir.join(format!("block_{}.csv", i + 1)), b, None)?;
        }
        let mut w = csv::Writer::from_path(dir.join("block_norms.csv"))?;
        w.write_record(["block", "order", "frobenius", "frobenius_sq"])?;
        for (i, n) in self.norms.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                ORDER_OF[i].to_string(),
                n.to_string(),
                (n * n).to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("order_norms.csv"))?;
        w.write_record(["order", "frobenius_sq"])?;
        for (o, v) in self.blocks.squared_norms_by_order().iter().enumerate() {
            w.write_record([o.to_string(), v.to_string()])?;
        }
        w.flush()?;
        let labels: Vec<String> = (1..=NUM_BLOCKS).map(|b| format!("S{b}")).collect();
        write_matrix_csv(&dir.join("inner_products.csv"), &self.table, Some(&labels))?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary())?,
        )?;
        Ok(())
    }
}

/// Plain numeric CSV, or with a label column and header when `labels` is set.
fn write_matrix_csv(path: &Path, m: &Matrix, labels: Option<&[String]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    if let Some(labels) = labels {
        let mut header = vec!["block".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
    }
    for (i, row) in m.outer_iter().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(labels) = labels {
            rec.push(labels[i].clone());
        }
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert_eq!(Suite::parse_selector("all").unwrap().len(), 6);
        assert_eq!(
            Suite::parse_selector("projector,vanishing").unwrap(),
            vec![Suite::Projector, Suite::Vanishing]
        );
        assert!(Suite::parse_selector("bogus").is_err());
    }

    #[test]
    fn checks_fail_on_nan() {
        assert!(!Check::at_most("x", f64::NAN, 1.0).pass);
        assert!(Check::at_most("x", 1.0, 1.0).pass);
        assert!(!Check::equals("x", 3.0, 4.0).pass);
    }

    #[test]
    fn merge_prefixes_and_aggregates() {
        let mut a = AuditReport::new("a", 1, 4, 2);
        a.checks.push(Check::at_most("c", 0.0, 1.0));
        let mut b = AuditReport::new("b", 1, 4, 2);
        b.checks.push(Check::at_most("c", 2.0, 1.0));
        let m = AuditReport::merge("all", vec![a, b]);
        assert_eq!(m.checks[1].id, "b/c");
        assert!(!m.overall);
        assert_eq!(m.failures().count(), 1);
    }

    #[test]
    fn rejects_wide_inputs() {
        let p = VerifyParams::new(1, 2, 4);
        assert!(run_suite(Suite::Projector, &p).is_err());
    }

    #[test]
    fn reports_are_reproducible() {
        let p = VerifyParams {
            instances: 2,
            ..VerifyParams::new(3, 8, 2)
        };
        let a = run_suite(Suite::Orthogonality, &p).unwrap();
        let b = run_suite(Suite::Orthogonality, &p).unwrap();
        assert_eq!(a.checks, b.checks);
        assert_eq!(a.observations, b.observations);
    }
}
