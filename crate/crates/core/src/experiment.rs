//! Multi-run experiments: one corpus, one initialization, several gradient methods.
//!
//! Output layout under the chosen directory:
//!
//! ```text
//! experiment.json          spec with every default filled in, plus run statuses
//! summary.csv              label, method, scales, min_val_loss, delta_pct_vs_standard
//! <label>/metrics.csv      step, epoch, split, loss, wall_ms
//! <label>/manifest.json    configs, seed, corpus, version, outcome
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{GradConfig, GradMethod};
use crate::data::{encode, ingest_corpus, synthetic_corpus, SequenceDataset, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::grad::{BlockGradMode, QKVModulation, ScaleConfig, SimplestScales};
use crate::model::{save_checkpoint, ModelConfig, ModelState};
use crate::train::{train_with, MetricRecord, RunStatus, Split, TrainConfig};

pub const VERSION: &str = concat!("spangrad ", env!("CARGO_PKG_VERSION"));

/// Where the token stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSpec {
    /// A text file read as raw bytes.
    Path(PathBuf),
    /// Generated English-like text.
    Synthetic { bytes: usize, seed: u64 },
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::Synthetic {
            bytes: 1 << 20,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    /// Paths are resolved against `base` when relative.
    pub fn load(&self, base: Option<&Path>, seq_len: usize) -> Result<Vec<usize>> {
        match self {
            Self::Path(p) => {
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                ingest_corpus(&p, seq_len)
            }
            Self::Synthetic { bytes, seed } => {
                Ok(encode(synthetic_corpus(*bytes, *seed).as_bytes()))
            }
        }
    }
}

/// The gradient-method fields one run overrides on the shared model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub label: String,
    #[serde(default)]
    pub method: GradMethod,
    /// `[α0, α1, α2, α3]` for score decomposition and reductionistic runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<[f64; 4]>,
    /// `[α∥, α⊥]` for simplest and unidirectional runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simplest: Option<[f64; 2]>,
    /// Baseline switch such as `QKV001`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<BlockGradMode>,
}

impl RunSpec {
    pub fn standard(label: &str) -> Self {
        Self {
            label: label.into(),
            method: GradMethod::Standard,
            scales: None,
            simplest: None,
            modulation: None,
            mode: None,
        }
    }

    pub fn score(label: &str, scales: [f64; 4]) -> Self {
        Self {
            method: GradMethod::ScoreDecomposition,
            scales: Some(scales),
            ..Self::standard(label)
        }
    }

    pub fn modulated(label: &str, modulation: &str) -> Self {
        Self {
            modulation: Some(modulation.into()),
            ..Self::standard(label)
        }
    }

    /// `base` with this run's method fields applied.
    pub fn grad_config(&self, base: &GradConfig) -> Result<GradConfig> {
        let mut g = GradConfig {
            method: self.method,
            ..*base
        };
        if let Some(a) = self.scales {
            g.scales = ScaleConfig::new(a)?;
        }
        if let Some([p, o]) = self.simplest {
            g.simplest = SimplestScales::new(p, o)?;
        }
        if let Some(m) = &self.modulation {
            g.modulation = m.parse::<QKVModulation>()?;
        }
        if let Some(mode) = self.mode {
            g.block_mode = mode;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub label: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Seed of the shared initial weights; defaults to `train.seed`.
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Label of the reference run for `delta_pct_vs_standard`; defaults to
    /// the first standard run without modulation.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub save_checkpoints: bool,
    pub runs: Vec<RunSpec>,
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl ExperimentSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.runs.is_empty() {
            return Err(Error::InvalidConfig("experiment has no runs".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.runs {
            if sanitize(&r.label).is_empty() {
                return Err(Error::InvalidConfig("run label must not be empty".into()));
            }
            if !seen.insert(sanitize(&r.label)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate run label `{}`",
                    r.label
                )));
            }
            r.grad_config(&self.model.grad)?;
        }
        if let Some(b) = &self.baseline {
            if !self.runs.iter().any(|r| &r.label == b) {
                return Err(Error::InvalidConfig(format!("baseline `{b}` is not a run")));
            }
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.train.seed)
    }

    fn baseline_label(&self) -> Option<String> {
        self.baseline.clone().or_else(|| {
            self.runs
                .iter()
                .find(|r| {
                    r.grad_config(&self.model.grad).is_ok_and(|g| {
                        g.method == GradMethod::Standard && g.modulation == QKVModulation::ALL
                    })
                })
                .map(|r| r.label.clone())
        })
    }
}

/// Directory-safe form of a run label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Diverged {
        step: usize,
        loss: f64,
    },
    /// Any other error; the run's partial metrics are still written.
    Failed {
        message: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusInfo {
    pub source: CorpusSpec,
    pub tokenizer: &'static str,
    pub vocab_size: usize,
    pub tokens: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub experiment: String,
    pub label: String,
    pub seed: u64,
    pub init_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusInfo,
    pub num_parameters: usize,
    pub outcome: RunOutcome,
    pub optimizer_steps: usize,
    pub min_val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub wall_ms: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: String,
    pub scales: String,
    pub min_val_loss: Option<f64>,
    pub delta_pct_vs_standard: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub grad: GradConfig,
    pub outcome: RunOutcome,
    pub log: crate::train::MetricsLog,
    pub optimizer_steps: usize,
    pub wall_ms: f64,
}

impl RunResult {
    pub fn min_val_loss(&self) -> Option<f64> {
        self.log.min_loss(Split::Validation)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    pub wall_ms: f64,
}

impl ExperimentOutcome {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.outcome == RunOutcome::Completed)
    }
}

/// `(standard - run) / standard * 100`: positive when the run reaches a lower minimum.
pub fn delta_pct(standard: f64, run: f64) -> f64 {
    (standard - run) / standard * 100.0
}

fn method_label(g: &GradConfig) -> String {
    let base = g.method.as_str().to_string();
    if g.modulation == QKVModulation::ALL {
        base
    } else {
        format!("{base}+{}", g.modulation)
    }
}

fn scales_label(g: &GradConfig) -> String {
    let join = |xs: &[f64]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    match g.method {
        GradMethod::ScoreDecomposition | GradMethod::Reductionistic => join(&g.scales.alpha),
        GradMethod::Simplest | GradMethod::Unidirectional => {
            join(&[g.simplest.alpha_parallel, g.simplest.alpha_orthogonal])
        }
        GradMethod::Standard => String::new(),
    }
}

pub fn summarize(runs: &[RunResult], baseline: Option<&str>) -> Vec<SummaryRow> {
    let reference = baseline
        .and_then(|b| runs.iter().find(|r| r.label == b))
        .and_then(|r| r.min_val_loss());
    runs.iter()
        .map(|r| {
            let min = r.min_val_loss();
            SummaryRow {
                label: r.label.clone(),
                method: method_label(&r.grad),
                scales: scales_label(&r.grad),
                min_val_loss: min,
                delta_pct_vs_standard: reference.zip(min).map(|(s, m)| delta_pct(s, m)),
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label",
        "method",
        "scales",
        "min_val_loss",
        "delta_pct_vs_standard",
    ])?;
    let opt = |v: Option<f64>, prec: usize| v.map_or(String::new(), |x| format!("{x:.prec$}"));
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.method.clone(),
            r.scales.clone(),
            opt(r.min_val_loss, 10),
            opt(r.delta_pct_vs_standard, 6),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ExperimentRecord<'a> {
    version: &'static str,
    spec: &'a ExperimentSpec,
    baseline: Option<String>,
    runs: Vec<(&'a str, &'a RunOutcome)>,
    wall_ms: f64,
}

/// Runs every configured method on identical data, seed and initial weights.
///
/// Files are rewritten after each run, so an interrupted experiment keeps
/// the results of the runs that finished. `base_dir` resolves relative
/// corpus paths.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    base_dir: Option<&Path>,
    mut progress: impl FnMut(&str, &MetricRecord),
) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let tokens = spec.corpus.load(base_dir, spec.model.seq_len)?;
    let dataset = SequenceDataset::split(&tokens, spec.model.seq_len, spec.validation_fraction)?;
    let (train_windows, validation_windows) = dataset.num_windows();
    let corpus = CorpusInfo {
        source: spec.corpus.clone(),
        tokenizer: "byte_level",
        vocab_size: BYTE_VOCAB,
        tokens: tokens.len(),
        train_windows,
        validation_windows,
    };
    let init = ModelState::init(&spec.model, spec.init_seed())?;
    let baseline = spec.baseline_label();
    let mut results: Vec<RunResult> = Vec::new();

    for run in &spec.runs {
        let grad = run.grad_config(&spec.model.grad)?;
        let model = ModelConfig {
            grad,
            ..spec.model.clone()
        };
        let run_start = Instant::now();
        let dir = out_dir.join(sanitize(&run.label));
        fs::create_dir_all(&dir)?;
        let trained = train_with(&model, &spec.train, &dataset, init.clone(), |r| {
            progress(&run.label, r)
        });
        let (outcome, log, steps, state) = match trained {
            Ok(t) => {
                let o = match t.status {
                    RunStatus::Completed => RunOutcome::Completed,
                    RunStatus::Diverged { step, loss } => RunOutcome::Diverged { step, loss },
                };
                (o, t.log, t.optimizer_steps, Some(t.state))
            }
            Err(e) => (
                RunOutcome::Failed {
                    message: e.to_string(),
                },
                Default::default(),
                0,
                None,
            ),
        };
        let result = RunResult {
            label: run.label.clone(),
            grad,
            outcome,
            log,
            optimizer_steps: steps,
            wall_ms: run_start.elapsed().as_secs_f64() * 1e3,
        };
        result.log.write_csv(&dir.join("metrics.csv"))?;
        let manifest = RunManifest {
            version: VERSION,
            experiment: spec.label.clone(),
            label: run.label.clone(),
            seed: spec.train.seed,
            init_seed: spec.init_seed(),
            model: model.clone(),
            train: spec.train.clone(),
            corpus: corpus.clone(),
            num_parameters: init.num_parameters(),
            outcome: result.outcome.clone(),
            optimizer_steps: steps,
            min_val_loss: result.min_val_loss(),
            final_train_loss: result.log.losses(Split::Train).last().copied(),
            wall_ms: result.wall_ms,
            warnings: model.warnings(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        if spec.save_checkpoints {
            if let Some(state) = &state {
                save_checkpoint(&dir.join("checkpoint.json"), &model, state)?;
            }
        }
        results.push(result);
        let summary = summarize(&results, baseline.as_deref());
        write_summary_csv(&out_dir.join("summary.csv"), &summary)?;
        let record = ExperimentRecord {
            version: VERSION,
            spec,
            baseline: baseline.clone(),
            runs: results
                .iter()
                .map(|r| (r.label.as_str(), &r.outcome))
                .collect(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        fs::write(
            out_dir.join("experiment.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
    }
    let summary = summarize(&results, baseline.as_deref());
    Ok(ExperimentOutcome {
        runs: results,
        summary,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_sign_convention() {
        // Lower minimum than standard is a positive improvement.
        let d = delta_pct(5.5165, 5.4856);
        assert!((d - 0.5601).abs() < 1e-3, "{d}");
        assert!(delta_pct(5.0, 5.1) < 0.0);
        assert_eq!(delta_pct(4.0, 4.0), 0.0);
    }

    #[test]
    fn labels_are_sanitized() {
        assert_eq!(sanitize("score[1000]"), "score_1000");
        assert_eq!(sanitize("QKV001"), "QKV001");
        assert_eq!(sanitize("[]"), "");
    }

    #[test]
    fn spec_defaults_and_validation() {
        let json = r#"{
            "label": "tiny",
            "model": {"seq_len": 8, "model_dim": 8, "num_heads": 2, "num_layers": 1},
            "runs": [
                {"label": "standard"},
                {"label": "score[1000]", "method": "score_decomposition", "scales": [1, 0, 0, 0]},
                {"label": "QKV001", "modulation": "QKV001"}
            ]
        }"#;
        let spec: ExperimentSpec = serde_json::from_str(json).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.validation_fraction, 0.1);
        assert_eq!(spec.train, TrainConfig::default());
        assert_eq!(spec.baseline_label().as_deref(), Some("standard"));
        let g = spec.runs[2].grad_config(&spec.model.grad).unwrap();
        assert_eq!(g.modulation, QKVModulation::V_ONLY);
        assert_eq!(method_label(&g), "standard+QKV001");
        let g = spec.runs[1].grad_config(&spec.model.grad).unwrap();
        assert_eq!(scales_label(&g), "1,0,0,0");

        let mut dup = spec.clone();
        dup.runs.push(RunSpec::standard("standard"));
        assert!(dup.validate().is_err());
        let mut bad = spec.clone();
        bad.runs[1].scales = Some([1.0, -1.0, 0.0, 0.0]);
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<RunSpec>(r#"{"label": "x", "bogus": 1}"#).is_err());
    }
}
