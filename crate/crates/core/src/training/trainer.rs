use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_batches, Batch, Dataset, Example};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::TransformerModel;
use crate::training::averaging::average;
use crate::training::optim::{add_l2_grad, l2_penalty, lr_at, Adam, L2Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Target tokens per batch.
    pub batch_tokens: usize,
    pub max_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub l2_lambda: f64,
    pub l2_scope: L2Scope,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Snapshot interval in steps; 0 disables snapshots and averaging.
    pub checkpoint_every: usize,
    /// Number of most recent snapshots averaged at the end; 0 disables.
    pub average_last_k: usize,
    /// Validation interval in steps; the final step is always evaluated.
    pub eval_every: usize,
    /// Steps per curve epoch.
    pub steps_per_epoch: usize,
    /// Training loss above which the run counts as exploded.
    pub divergence_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 1e-3,
            warmup_steps: 200,
            batch_tokens: 256,
            max_steps: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.997,
            adam_eps: 1e-9,
            l2_lambda: 0.0,
            l2_scope: L2Scope::Weights,
            label_smoothing: 0.0,
            seed: 1,
            checkpoint_every: 100,
            average_last_k: 5,
            eval_every: 200,
            steps_per_epoch: 500,
            divergence_loss: 100.0,
        }
    }
}

impl TrainConfig {
    /// Doubled learning rate, warmup and batch size.
    pub fn tuned(&self) -> Self {
        TrainConfig {
            lr_peak: 2.0 * self.lr_peak,
            warmup_steps: 2 * self.warmup_steps,
            batch_tokens: 2 * self.batch_tokens,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{field}"), reason))
            }
        };
        check(
            self.lr_peak > 0.0 && self.lr_peak.is_finite(),
            "lr_peak",
            "must be positive",
        )?;
        check(self.warmup_steps >= 1, "warmup_steps", "must be at least 1")?;
        check(self.batch_tokens >= 1, "batch_tokens", "must be at least 1")?;
        check(self.max_steps >= 1, "max_steps", "must be at least 1")?;
        check(
            (0.0..1.0).contains(&self.adam_beta1),
            "adam_beta1",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.adam_beta2),
            "adam_beta2",
            "must lie in [0, 1)",
        )?;
        check(self.adam_eps >= 0.0, "adam_eps", "must be non-negative")?;
        check(
            self.l2_lambda >= 0.0 && self.l2_lambda.is_finite(),
            "l2_lambda",
            "must be non-negative",
        )?;
        check(
            (0.0..1.0).contains(&self.label_smoothing),
            "label_smoothing",
            "must lie in [0, 1)",
        )?;
        check(self.eval_every >= 1, "eval_every", "must be at least 1")?;
        check(
            self.steps_per_epoch >= 1,
            "steps_per_epoch",
            "must be at least 1",
        )?;
        check(
            self.divergence_loss > 0.0,
            "divergence_loss",
            "must be positive",
        )?;
        check(
            self.average_last_k == 0 || self.checkpoint_every >= 1,
            "average_last_k",
            "averaging needs checkpoint_every >= 1",
        )
    }

    fn epoch(&self, step: usize) -> f64 {
        step as f64 / self.steps_per_epoch as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    /// Cross-entropy of the batch, without the L2 term.
    pub train_loss: f64,
    pub l2_penalty: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: f64,
    pub valid_loss: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedEval {
    pub checkpoints: usize,
    pub valid_loss: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub diverged: Option<Divergence>,
    pub averaged: Option<AveragedEval>,
}

impl RunRecord {
    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    pub fn final_valid_loss(&self) -> Option<f64> {
        self.final_eval().map(|e| e.valid_loss)
    }

    pub const STEP_COLUMNS: &'static str = "step,epoch,lr,train_loss,l2_penalty,grad_norm,tokens";
    pub const EVAL_COLUMNS: &'static str = "step,epoch,valid_loss,token_accuracy";

    pub fn steps_csv(&self) -> String {
        let mut out = format!("{}\n", Self::STEP_COLUMNS);
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.step, s.epoch, s.lr, s.train_loss, s.l2_penalty, s.grad_norm, s.tokens
            );
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = format!("{}\n", Self::EVAL_COLUMNS);
        for e in &self.evals {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.step, e.epoch, e.valid_loss, e.token_accuracy
            );
        }
        out
    }
}

/// Token-weighted validation loss and teacher-forced argmax accuracy.
pub fn evaluate(model: &TransformerModel, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss_sum, mut hits, mut count) = (0.0, 0usize, 0usize);
    for batch in batches {
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch.src, &batch.tgt_in, None)?;
        let loss = tape.cross_entropy(logits, &batch.targets, 0.0)?;
        let n = batch.targets.iter().flatten().count();
        loss_sum += tape.value(loss).item() * n as f64;
        let values = tape.value(logits);
        for (row, target) in batch.targets.iter().enumerate() {
            if let Some(t) = target {
                let r = values.row(row);
                let best = (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
                hits += usize::from(best == *t);
            }
        }
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("validation set has no target tokens".into()));
    }
    Ok((loss_sum / count as f64, hits as f64 / count as f64))
}

/// Batches for evaluation: fixed order, independent of the training seed.
pub fn eval_batches(split: &[Example], batch_tokens: usize) -> Result<Vec<Batch>> {
    make_batches(split, batch_tokens, 0)
}

/// Trains `model` in place on `data.train`, validating on `data.valid`.
///
/// When `checkpoint_dir` is given, snapshots are also written there as
/// `step_{step:06}.ckpt`. On success the model holds the average of the last
/// `average_last_k` snapshots, if any were taken.
pub fn train(
    model: &mut TransformerModel,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunRecord> {
    train_with_loss_hook(model, data, cfg, checkpoint_dir, |_, loss| loss)
}

/// [`train`] with a hook that may replace the observed batch loss, e.g. to
/// inject a failure at a chosen step.
pub fn train_with_loss_hook(
    model: &mut TransformerModel,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut hook: impl FnMut(usize, f64) -> f64,
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let valid = eval_batches(&data.valid, cfg.batch_tokens)?;
    let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d0d0);
    let use_dropout = model.config().dropout > 0.0;
    let mut record = RunRecord::default();
    let mut snapshots: VecDeque<Checkpoint> = VecDeque::new();
    let mut epoch = 0u64;
    let mut queue: VecDeque<Batch> = VecDeque::new();

    for step in 1..=cfg.max_steps {
        if queue.is_empty() {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch);
            queue.extend(make_batches(&data.train, cfg.batch_tokens, seed)?);
            epoch += 1;
        }
        let batch = queue.pop_front().expect("refilled above");
        let lr = lr_at(step, cfg.lr_peak, cfg.warmup_steps);

        let mut tape = Tape::new();
        let rng: Option<&mut dyn RngCore> = if use_dropout {
            Some(&mut dropout_rng)
        } else {
            None
        };
        let logits = model.forward(&mut tape, &batch.src, &batch.tgt_in, rng)?;
        let ce = tape.cross_entropy(logits, &batch.targets, cfg.label_smoothing)?;
        let ce_value = hook(step, tape.value(ce).item());
        let penalty = l2_penalty(&model.store, cfg.l2_lambda, cfg.l2_scope);

        let reason = if !ce_value.is_finite() || !penalty.is_finite() {
            Some("non-finite loss".to_string())
        } else if ce_value > cfg.divergence_loss {
            Some(format!("loss {ce_value} exceeds {}", cfg.divergence_loss))
        } else {
            None
        };
        if let Some(reason) = reason {
            record.diverged = Some(Divergence { step, reason });
            return Ok(record);
        }

        model.store.zero_grad();
        tape.backward(ce, &mut model.store)?;
        add_l2_grad(&mut model.store, cfg.l2_lambda, cfg.l2_scope);
        let grad_norm = model.store.grad_norm();
        if !grad_norm.is_finite() {
            record.diverged = Some(Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
            return Ok(record);
        }
        adam.step(&mut model.store, lr)?;
        record.steps.push(StepRecord {
            step,
            epoch: cfg.epoch(step),
            lr,
            train_loss: ce_value,
            l2_penalty: penalty,
            grad_norm,
            tokens: batch.token_count,
        });

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (valid_loss, token_accuracy) = evaluate(model, &valid)?;
            if !valid_loss.is_finite() {
                record.diverged = Some(Divergence {
                    step,
                    reason: "non-finite validation loss".into(),
                });
                return Ok(record);
            }
            record.evals.push(EvalRecord {
                step,
                epoch: cfg.epoch(step),
                valid_loss,
                token_accuracy,
            });
        }

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            let meta = BTreeMap::from([
                ("step".to_string(), step.to_string()),
                ("seed".to_string(), cfg.seed.to_string()),
            ]);
            let ck = Checkpoint::from_store(&model.store, meta);
            if let Some(dir) = checkpoint_dir {
                ck.save(dir.join(format!("step_{step:06}.ckpt")))?;
            }
            snapshots.push_back(ck);
            if snapshots.len() > cfg.average_last_k {
                snapshots.pop_front();
            }
        }
    }

    if cfg.average_last_k > 0 && !snapshots.is_empty() {
        let snaps: Vec<Checkpoint> = snapshots.into_iter().collect();
        average(&snaps)?.apply_to(&mut model.store)?;
        let (valid_loss, token_accuracy) = evaluate(model, &valid)?;
        record.averaged = Some(AveragedEval {
            checkpoints: snaps.len(),
            valid_loss,
            token_accuracy,
        });
    }
    Ok(record)
}
