//! Adam training loop with gradient accumulation, evaluation and metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{inputs_and_targets, SequenceDataset};
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy, loss_and_grads, model_forward, Dropout, ModelConfig, ModelState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay; zero by default.
    pub weight_decay: f64,
    pub seed: u64,
    /// Validation every this many optimizer steps, in addition to each epoch end. Zero disables.
    pub eval_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Shuffle training windows each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            micro_batch: 16,
            accumulation_steps: 8,
            epochs: 5,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 0,
            max_steps: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.effective_batch() == 0 {
            return Err(Error::InvalidConfig(
                "effective batch must be positive".into(),
            ));
        }
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::InvalidConfig(
                "invalid optimizer hyperparameters".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ModelState,
    v: ModelState,
    step: u64,
}

impl Adam {
    pub fn new(like: &ModelState) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelState, grads: &ModelState, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = cfg.learning_rate;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                    *p -= lr * (update + cfg.weight_decay * *p);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// One CSV row: `step, epoch, split, loss, wall_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, record: MetricRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step <= record.step));
        self.records.push(record);
    }

    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }

    pub fn min_loss(&self, split: Split) -> Option<f64> {
        self.losses(split).into_iter().reduce(f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "epoch", "split", "loss", "wall_ms"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                r.split.as_str().to_string(),
                format!("{:.17e}", r.loss),
                format!("{:.3}", r.wall_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, loss: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: MetricsLog,
    pub status: RunStatus,
    pub optimizer_steps: usize,
}

/// Mean next-token loss over every position of every window, without dropout.
pub fn evaluate(
    state: &ModelState,
    cfg: &ModelConfig,
    windows: &[Vec<usize>],
    batch: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidConfig("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch.max(1)) {
        let (inputs, targets) = inputs_and_targets(chunk);
        let (logits, _) = model_forward(state, &inputs, cfg, Dropout::Off)?;
        let (loss, _) = cross_entropy(&logits, &targets)?;
        total += loss * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

/// Splitmix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Window order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            seed,
            0x5348_5546,
            epoch as u64,
        )));
    }
    order
}

pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &SequenceDataset,
    init: ModelState,
) -> Result<TrainOutcome> {
    train_with(model_cfg, train_cfg, dataset, init, |_| {})
}

/// Runs the configured epochs; `on_record` sees each metric as it is logged.
///
/// Each optimizer step averages the gradients of `accumulation_steps`
/// micro-batches. A trailing group smaller than the effective batch is
/// skipped. Dropout masks depend only on the seed, step and micro-batch
/// index, so runs that differ only in gradient method see identical masks.
pub fn train_with(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &SequenceDataset,
    init: ModelState,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let group = train_cfg.effective_batch();
    if dataset.train.len() < group {
        return Err(Error::EmptyCorpus {
            len: dataset.train.len(),
            needed: group,
        });
    }
    let start = Instant::now();
    let mut state = init;
    let mut adam = Adam::new(&state);
    let mut log = MetricsLog::default();
    let mut step = 0usize;
    let mut record = |log: &mut MetricsLog, step, epoch, split, loss| {
        let r = MetricRecord {
            step,
            epoch,
            split,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_record(&r);
        log.push(r);
    };
    let validate = |state: &ModelState| -> Result<Option<f64>> {
        if dataset.validation.is_empty() {
            Ok(None)
        } else {
            evaluate(state, model_cfg, &dataset.validation, train_cfg.micro_batch).map(Some)
        }
    };
    let scale = 1.0 / train_cfg.accumulation_steps as f64;

    let mut last_epoch = 0;
    'epochs: for epoch in 0..train_cfg.epochs {
        last_epoch = epoch;
        let order = epoch_order(
            dataset.train.len(),
            train_cfg.seed,
            epoch,
            train_cfg.shuffle,
        );
        for ids in order.chunks_exact(group) {
            if train_cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut grads = state.zeros_like();
            let mut loss = 0.0;
            for (micro, mids) in ids.chunks(train_cfg.micro_batch).enumerate() {
                let windows: Vec<&Vec<usize>> = mids.iter().map(|&i| &dataset.train[i]).collect();
                let (inputs, targets) = inputs_and_targets(&windows);
                let dropout = Dropout::Seeded(mix_seed(train_cfg.seed, step as u64, micro as u64));
                let (l, g) = match loss_and_grads(&state, &inputs, &targets, model_cfg, dropout) {
                    Ok(lg) => lg,
                    // Overflowed activations reach the projectors before the loss.
                    Err(Error::NonFinite { .. } | Error::SingularGram { .. }) => {
                        step += 1;
                        record(&mut log, step, epoch, Split::Train, f64::NAN);
                        return Ok(TrainOutcome {
                            state,
                            log,
                            status: RunStatus::Diverged {
                                step,
                                loss: f64::NAN,
                            },
                            optimizer_steps: step,
                        });
                    }
                    Err(e) => return Err(e),
                };
                loss += l * scale;
                grads.add_scaled(&g, scale);
            }
            step += 1;
            record(&mut log, step, epoch, Split::Train, loss);
            if !loss.is_finite() || !grads.is_finite() {
                return Ok(TrainOutcome {
                    state,
                    log,
                    status: RunStatus::Diverged { step, loss },
                    optimizer_steps: step,
                });
            }
            adam.update(&mut state, &grads, train_cfg);
            if !state.is_finite() {
                return Ok(TrainOutcome {
                    state,
                    log,
                    status: RunStatus::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    optimizer_steps: step,
                });
            }
            if train_cfg.eval_every > 0 && step.is_multiple_of(train_cfg.eval_every) {
                if let Some(v) = validate(&state)? {
                    record(&mut log, step, epoch, Split::Validation, v);
                }
            }
        }
        let evaluated_here = train_cfg.eval_every > 0 && step.is_multiple_of(train_cfg.eval_every);
        if !evaluated_here {
            if let Some(v) = validate(&state)? {
                record(&mut log, step, epoch, Split::Validation, v);
            }
        }
    }
    // Stopping on max_steps skips the epoch-end evaluation.
    let evaluated = log
        .records
        .last()
        .is_some_and(|r| r.split == Split::Validation && r.step == step);
    if !evaluated {
        if let Some(v) = validate(&state)? {
            record(&mut log, step, last_epoch, Split::Validation, v);
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        status: RunStatus::Completed,
        optimizer_steps: step,
    })
}

/// Appends one line to a progress stream, ignoring closed pipes.
pub fn print_record(out: &mut impl Write, label: &str, r: &MetricRecord) {
    let _ = writeln!(
        out,
        "[{label}] step {:>6} epoch {:>3} {:<10} loss {:.6} ({:.1} s)",
        r.step,
        r.epoch,
        r.split.as_str(),
        r.loss,
        r.wall_ms / 1e3
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_seeds_differ() {
        assert_ne!(mix_seed(1, 0, 0), mix_seed(1, 1, 0));
        assert_ne!(mix_seed(1, 0, 1), mix_seed(1, 1, 0));
        assert_eq!(mix_seed(7, 3, 4), mix_seed(7, 3, 4));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(50, 3, 1, true);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
        assert_eq!(epoch_order(5, 3, 1, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_zero_batch() {
        let cfg = TrainConfig {
            micro_batch: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
