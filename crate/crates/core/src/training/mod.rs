// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-stage fence curriculum.
//!
//! Stage 1 injects the correct flags into every fenced dimension and trains
//! on cross-entropy alone, so the network learns to consume the flags.
//! Stage 2 removes the injection and adds `λ_t · position_loss`, with λ_t
//! ramping linearly from 0, so the network learns to produce them. Without
//! a fence the same loop is plain cross-entropy training.

mod metrics;
mod schedule;

pub use metrics::{MetricsLog, MetricsRecord, Mode, Stage};
pub use schedule::{lambda_at, TrainSchedule};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::corpus::{LabeledExample, Vocab};
use crate::error::{Error, Result};
use crate::fence::{make_injection_hook, position_loss, AssistantMask, FenceConfig, LabelVector};
use crate::model::{LayerHook, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor, Var};

/// One tokenized training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    pub mask: AssistantMask,
    /// Present when a fence is in use.
    pub labels: Option<LabelVector>,
}

/// Tokenizes `examples`, attaching fence labels when `fence` is given.
/// Sequences longer than `max_len` are rejected.
pub fn encode_corpus(
    examples: &[LabeledExample],
    vocab: &Vocab,
    fence: Option<&FenceConfig>,
    max_len: usize,
) -> Result<Vec<Sequence>> {
    examples
        .iter()
        .map(|ex| {
            let enc = vocab.encode(ex)?;
            if enc.ids.len() > max_len {
                return Err(Error::ContextLength {
                    len: enc.ids.len(),
                    max: max_len,
                });
            }
            Ok(Sequence {
                ids: enc.ids,
                mask: enc.mask,
                labels: fence.map(|f| ex.label_vector(f)).transpose()?,
            })
        })
        .collect()
}

/// Loss terms of one sequence on a shared tape.
struct SeqLoss<'t> {
    ce: Var<'t>,
    position: Option<(Var<'t>, Vec<Var<'t>>)>,
}

/// Next-token cross-entropy over assistant targets, plus the fence's
/// position loss when `fence` is given. `inject` selects stage-1 behaviour.
fn sequence_loss<'t>(
    bound: &crate::model::BoundModel<'t, '_>,
    seq: &Sequence,
    fence: Option<&FenceConfig>,
    inject: bool,
) -> Result<SeqLoss<'t>> {
    let hook = match (fence, inject) {
        (Some(f), true) => Some(make_injection_hook(require_labels(seq)?, f)?),
        _ => None,
    };
    let out = bound.forward(&seq.ids, hook.as_ref().map(|h| h as &dyn LayerHook))?;
    let n = seq.ids.len();
    let mut targets = vec![0usize; n];
    let mut ce_mask = vec![0.0f32; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = seq.ids[t + 1];
        if seq.mask.0[t + 1] {
            ce_mask[t] = 1.0;
        }
    }
    let ce = out.logits.cross_entropy(&targets, &ce_mask)?;
    let position = match fence {
        Some(f) => {
            let pl = position_loss(&out.trace, require_labels(seq)?, &seq.mask, f, f.normalization)?;
            Some((pl.total, pl.per_layer))
        }
        None => None,
    };
    Ok(SeqLoss { ce, position })
}

fn require_labels(seq: &Sequence) -> Result<&LabelVector> {
    seq.labels
        .as_ref()
        .ok_or_else(|| Error::Config("fenced training needs labelled sequences".into()))
}

/// Mean of scalar vars.
fn mean<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = acc.add(*v)?;
    }
    Ok(acc.div_scalar(vars.len() as f32))
}

/// Drives training of one model on one dataset.
pub struct Trainer<'d> {
    model: Model,
    fence: Option<FenceConfig>,
    schedule: TrainSchedule,
    optimizer: AdamState,
    step: u64,
    train: &'d [Sequence],
    eval: &'d [Sequence],
    vocab: Vec<String>,
    metrics: MetricsLog,
    checkpoint_dir: Option<PathBuf>,
    perm: Option<(u64, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    /// Fresh optimizer state; `fence` must already be calibrated.
    pub fn new(
        model: Model,
        fence: Option<FenceConfig>,
        schedule: TrainSchedule,
        train: &'d [Sequence],
        eval: &'d [Sequence],
        vocab: Vec<String>,
    ) -> Result<Self> {
        schedule.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(f) = &fence {
            f.validate_layout()?;
            if !f.is_calibrated() {
                return Err(Error::Config("fence targets must be calibrated before training".into()));
            }
            if f.hidden_dim != model.config().hidden_dim {
                return Err(Error::Config(format!(
                    "fence hidden_dim {} does not match model hidden_dim {}",
                    f.hidden_dim,
                    model.config().hidden_dim
                )));
            }
        }
        if vocab.len() != model.config().vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} words for a model with vocab_size {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        let refs: Vec<&Tensor> = model.params().iter().map(|p| p.as_ref()).collect();
        let optimizer = AdamState::new(&refs);
        Ok(Self {
            model,
            fence,
            schedule,
            optimizer,
            step: 0,
            train,
            eval,
            vocab,
            metrics: MetricsLog::default(),
            checkpoint_dir: None,
            perm: None,
        })
    }

    /// Continues a run saved by [`Trainer::save_checkpoint`]. The schedule
    /// must have the same fingerprint.
    pub fn resume(ckpt: Checkpoint, schedule: TrainSchedule, train: &'d [Sequence], eval: &'d [Sequence]) -> Result<Self> {
        let fp = schedule.fingerprint();
        if ckpt.header.schedule_fingerprint.as_deref() != Some(fp.as_str()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint schedule fingerprint {:?} does not match {fp}",
                ckpt.header.schedule_fingerprint
            )));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        let mut t = Self::new(ckpt.model, ckpt.header.fence, schedule, train, eval, ckpt.header.vocab)?;
        t.optimizer = optimizer;
        t.step = ckpt.header.step;
        Ok(t)
    }

    /// Checkpoints are written here every `checkpoint_every` steps and at
    /// the end of [`Trainer::run`].
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Streams metrics records to `path` (appending) as they are produced.
    pub fn with_metrics_file(mut self, path: &Path) -> Result<Self> {
        self.metrics = MetricsLog::with_sink(path)?;
        Ok(self)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn fence(&self) -> Option<&FenceConfig> {
        self.fence.as_ref()
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn into_parts(self) -> (Model, MetricsLog) {
        (self.model, self.metrics)
    }

    pub fn stage_at(&self, step: u64) -> Stage {
        match &self.fence {
            None => Stage::Plain,
            Some(_) if step < self.schedule.stage1_steps => Stage::Injection,
            Some(_) => Stage::Transfer,
        }
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.train.len() as u64;
        let b = self.schedule.batch_size as u64;
        (0..b)
            .map(|i| {
                let global = step * b + i;
                let epoch = global / n;
                if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.train.len()).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    perm.shuffle(&mut rng);
                    self.perm = Some((epoch, perm));
                }
                self.perm.as_ref().expect("set above").1[(global % n) as usize]
            })
            .collect()
    }

    /// One optimizer step; returns its training record.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let stage = self.stage_at(step);
        let lambda = if stage == Stage::Transfer {
            lambda_at(step, &self.schedule)
        } else {
            0.0
        };
        let batch = self.batch_indices(step);
        let fence = self.fence.as_ref();
        let inject = stage == Stage::Injection;

        let tape = Tape::new();
        let bound = self.model.bind(&tape, true);
        let mut ces = Vec::with_capacity(batch.len());
        let mut positions = Vec::with_capacity(batch.len());
        let mut layer_terms: Vec<Vec<Var<'_>>> = Vec::new();
        for &i in &batch {
            let l = sequence_loss(&bound, &self.train[i], fence, inject)?;
            ces.push(l.ce);
            if let Some((total, per_layer)) = l.position {
                positions.push(total);
                layer_terms.push(per_layer);
            }
        }
        let ce = mean(&ces)?;
        let position = if positions.is_empty() { None } else { Some(mean(&positions)?) };
        let objective = match (position, stage) {
            (Some(p), Stage::Transfer) if lambda > 0.0 => ce.add(p.scale(lambda))?,
            _ => ce,
        };
        let ce_value = ce.value().item();
        let objective_value = objective.value().item();
        if !objective_value.is_finite() {
            return Err(self.divergence("loss"));
        }
        let per_layer = per_layer_means(&layer_terms);
        let position_value = position.map(|p| p.value().item());

        let mut grads = tape.backward(objective);
        let mut grad_list: Vec<Tensor> = bound
            .param_vars()
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| grads.take_id(v.id()).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(bound);
        drop(tape);
        if let Some(clip) = self.schedule.grad_clip {
            clip_global_norm(&mut grad_list, clip);
        }
        let cfg = AdamConfig {
            lr: self.schedule.lr_at(step),
            ..AdamConfig::default()
        };
        let grad_refs: Vec<&Tensor> = grad_list.iter().collect();
        let mut params: Vec<(&str, &mut Tensor)> = self.model.params_mut().collect();
        if let Err(e) = adam_step(&mut params, &grad_refs, &mut self.optimizer, &cfg) {
            return Err(match e {
                Error::Divergence { param } => self.divergence(&param),
                other => other,
            });
        }
        self.step += 1;
        let rec = MetricsRecord {
            step,
            mode: Mode::Train,
            stage,
            lambda,
            ce_loss: ce_value,
            position_loss: position_value,
            per_layer,
        };
        self.metrics.push(rec.clone())?;
        Ok(rec)
    }

    fn divergence(&self, what: &str) -> Error {
        let last = self
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(CHECKPOINT_NAME).display().to_string())
            .unwrap_or_else(|| "none".into());
        Error::Divergence {
            param: format!("{what} at step {} (last good checkpoint: {last})", self.step),
        }
    }

    /// Evaluation-mode losses on the held-out batch at the current weights.
    /// Injection is active iff the current step is in stage 1.
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let step = self.step;
        let stage = self.stage_at(step);
        let rec = evaluate_losses(&self.model, self.fence.as_ref(), self.eval, stage == Stage::Injection)?;
        Ok(MetricsRecord {
            step,
            mode: Mode::Eval,
            stage,
            lambda: if stage == Stage::Transfer {
                lambda_at(step, &self.schedule)
            } else {
                0.0
            },
            ..rec
        })
    }

    fn log_eval(&mut self) -> Result<()> {
        if self.eval.is_empty() {
            return Ok(());
        }
        let rec = self.evaluate()?;
        self.metrics.push(rec)
    }

    /// Trains until `total_steps`, evaluating every `eval_every` steps and
    /// checkpointing every `checkpoint_every` steps.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.schedule.total_steps)
    }

    /// Trains until `step == until` (clamped to `total_steps`).
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        let until = until.min(self.schedule.total_steps);
        while self.step < until {
            if self.schedule.eval_every > 0 && self.step.is_multiple_of(self.schedule.eval_every) {
                self.log_eval()?;
            }
            let rec = self.train_step()?;
            if self.step.is_multiple_of(100) {
                log::info!(
                    "step {} {:?} ce {:.4} pos {:?} λ {:.3}",
                    rec.step,
                    rec.stage,
                    rec.ce_loss,
                    rec.position_loss,
                    rec.lambda
                );
            }
            if self.schedule.checkpoint_every > 0 && self.step.is_multiple_of(self.schedule.checkpoint_every) {
                self.write_checkpoint()?;
            }
        }
        if self.step == self.schedule.total_steps {
            let last_eval = self.metrics.records().iter().rev().find(|r| r.mode == Mode::Eval);
            if last_eval.map(|r| r.step) != Some(self.step) {
                self.log_eval()?;
            }
            self.write_checkpoint()?;
        }
        self.metrics.flush()
    }

    fn write_checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            self.save_checkpoint(&dir.join(CHECKPOINT_NAME))?;
        }
        Ok(())
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.model.config().clone(),
            fence: self.fence.clone(),
            vocab: self.vocab.clone(),
            schedule_fingerprint: Some(self.schedule.fingerprint()),
            seed: self.schedule.seed,
            step: self.step,
        }
    }

    /// Weights plus optimizer state, enough for [`Trainer::resume`].
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.model, Some(&self.optimizer))
    }
}

/// File name used inside a checkpoint directory.
pub const CHECKPOINT_NAME: &str = "model.ckpt";

fn per_layer_means(terms: &[Vec<Var<'_>>]) -> Vec<f32> {
    let Some(first) = terms.first() else { return Vec::new() };
    (0..first.len())
        .map(|k| terms.iter().map(|t| t[k].value().item()).sum::<f32>() / terms.len() as f32)
        .collect()
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean cross-entropy and position loss over `seqs` without updating
/// anything. `inject` applies the stage-1 injection hook.
pub fn evaluate_losses(model: &Model, fence: Option<&FenceConfig>, seqs: &[Sequence], inject: bool) -> Result<MetricsRecord> {
    if seqs.is_empty() {
        return Err(Error::Evaluation("evaluation set is empty".into()));
    }
    let mut ce = 0.0f64;
    let mut pos = 0.0f64;
    let mut layers: Vec<f64> = Vec::new();
    for seq in seqs {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let l = sequence_loss(&bound, seq, fence, inject)?;
        ce += f64::from(l.ce.value().item());
        if let Some((total, per_layer)) = l.position {
            pos += f64::from(total.value().item());
            layers.resize(per_layer.len(), 0.0);
            for (acc, v) in layers.iter_mut().zip(&per_layer) {
                *acc += f64::from(v.value().item());
            }
        }
    }
    let n = seqs.len() as f64;
    Ok(MetricsRecord {
        step: 0,
        mode: Mode::Eval,
        stage: if fence.is_some() { Stage::Transfer } else { Stage::Plain },
        lambda: 0.0,
        ce_loss: (ce / n) as f32,
        position_loss: fence.map(|_| (pos / n) as f32),
        per_layer: layers.iter().map(|v| (v / n) as f32).collect(),
    })
}
