use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{derive_rng, AugmentParams, AugmentStrategy};
use crate::error::{ensure, Error, Result};
use crate::heads::{head_loss, is_fatigued, predict, HeadKind, LabelPair, LossConfig, Prediction};
use crate::model::ModelGraph;
use crate::ops::softmax;
use crate::params::{ForwardCtx, Mode, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::dataset::{stack_clips, Dataset};
use super::early::early_stop_check;
use super::optim::{adam_step, lr_at, AdamState};

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy,lr";

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Epochs without a strictly lower monitored loss before stopping.
    pub patience: usize,
    /// Length of the learning-rate schedule; training never runs past it.
    pub total_iterations: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub augmentation: AugmentStrategy,
    /// Stop once an epoch's running training accuracy reaches this fraction.
    pub target_train_accuracy: Option<f32>,
    pub max_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            weight_decay: 0.001,
            batch_size: 32,
            patience: 20,
            total_iterations: 3000,
            loss: LossConfig::default(),
            seed: 0,
            augmentation: AugmentStrategy::More,
            target_train_accuracy: None,
            max_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr > 0.0, "base learning rate must be positive");
        ensure!(self.weight_decay >= 0.0, "weight decay must be nonnegative");
        ensure!(self.batch_size >= 2, "batch size must be at least 2 for batch norm");
        ensure!(self.patience >= 1, "patience must be at least 1");
        ensure!(self.total_iterations >= 1, "total_iterations must be positive");
        self.loss.validate()
    }
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f32,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f32,
    pub val_loss: Option<f32>,
    pub val_accuracy: Option<f32>,
    /// Learning rate of the epoch's last iteration.
    pub lr: f32,
    /// Iterations completed so far.
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopping,
    IterationBudget,
    TargetAccuracy,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Carries the weights of the best epoch.
    pub model: ModelGraph,
    pub history: Vec<EpochRecord>,
    /// Learning rate of every iteration.
    pub lr_trace: Vec<f32>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl TrainedModel {
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_accuracy),
            r.lr
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, loss_csv(history)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Model outputs on a dataset in evaluation mode.
#[derive(Clone, Debug, Default)]
pub struct EvalResult {
    /// Mean per-sample loss.
    pub loss: f32,
    /// Mean unweighted cross-entropy term; logged even when α = 0.
    pub cross_entropy: f32,
    pub mse: f32,
    pub accuracy: f32,
    pub predictions: Vec<Prediction>,
    /// Score for the fatigued class: summed probability of the fatigued bins,
    /// or the continuous estimate for the regression head.
    pub scores: Vec<f32>,
    pub labels: Vec<LabelPair>,
    pub video_ids: Vec<String>,
}

fn positive_scores(logits: &Tensor, cfg: &LossConfig) -> Result<Vec<f32>> {
    match cfg.head {
        HeadKind::Categorical => {
            let q = softmax(logits, 1)?;
            Ok(q
                .data()
                .chunks(cfg.k)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(c, _)| is_fatigued(*c, cfg.k))
                        .map(|(_, p)| p)
                        .sum()
                })
                .collect())
        }
        HeadKind::Continuous => Ok(predict(logits, cfg)?.iter().map(|p| p.continuous).collect()),
    }
}

pub fn evaluate(model: &ModelGraph, data: &Dataset, cfg: &LossConfig, batch_size: usize) -> Result<EvalResult> {
    ensure!(!data.is_empty(), "cannot evaluate on an empty dataset");
    ensure!(batch_size >= 1, "batch size must be positive");
    let mut result = EvalResult::default();
    let (mut loss_sum, mut ce_sum, mut mse_sum) = (0f64, 0f64, 0f64);
    for batch in data.samples.chunks(batch_size) {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &model.store, Mode::Eval).without_param_grads();
        let x = tape.constant(stack_clips(batch.iter().map(|s| &s.clip.data))?);
        let out = model.forward(&ctx, x)?;
        let labels: Vec<LabelPair> = batch.iter().map(|s| s.labels).collect();
        let (_, breakdown) = head_loss(out, &labels, cfg)?;
        loss_sum += breakdown.total as f64 * batch.len() as f64;
        ce_sum += breakdown.cross_entropy as f64 * batch.len() as f64;
        mse_sum += breakdown.mse as f64 * batch.len() as f64;
        let logits = out.value();
        result.predictions.extend(predict(&logits, cfg)?);
        result.scores.extend(positive_scores(&logits, cfg)?);
        result.labels.extend(labels);
        result.video_ids.extend(batch.iter().map(|s| s.clip.video_id.clone()));
    }
    let n = data.len();
    result.loss = (loss_sum / n as f64) as f32;
    result.cross_entropy = (ce_sum / n as f64) as f32;
    result.mse = (mse_sum / n as f64) as f32;
    let correct = result
        .predictions
        .iter()
        .zip(&result.labels)
        .filter(|(p, l)| p.class == l.categorical)
        .count();
    result.accuracy = correct as f32 / n as f32;
    Ok(result)
}

/// One optimization step; returns the batch loss and training-mode predictions.
fn train_step(
    model: &mut ModelGraph,
    batch: Tensor,
    labels: &[LabelPair],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f32,
) -> Result<(f32, Vec<Prediction>)> {
    let tape = Tape::new();
    let ctx = ForwardCtx::new(&tape, &model.store, Mode::Train);
    let out = model.forward(&ctx, tape.constant(batch))?;
    let (loss, breakdown) = head_loss(out, labels, &cfg.loss)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!(
            "loss became {} (cross-entropy {}, mse {})",
            breakdown.total, breakdown.cross_entropy, breakdown.mse
        )));
    }
    let predictions = predict(&out.value(), &cfg.loss)?;
    let record = ctx.finish();
    tape.backward(loss)?;
    record.accumulate_grads(&mut model.store);
    record.apply_updates(&mut model.store);
    adam_step(&mut model.store, adam, lr, cfg.weight_decay);
    model.store.zero_grad();
    Ok((breakdown.total, predictions))
}

pub fn train(model: ModelGraph, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

/// Epoch loop: shuffle, augment, step with the scheduled learning rate, then
/// evaluate. Early stopping monitors validation loss, or training loss when
/// there is no validation set. The returned model holds the best epoch's weights.
pub fn train_with_progress(
    mut model: ModelGraph,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), "training set is empty");
    ensure!(
        model.config.head.head == cfg.loss.head && model.config.head.k == cfg.loss.k,
        "model head ({}, k={}) does not match the training head ({}, k={})",
        model.config.head.head,
        model.config.head.k,
        cfg.loss.head,
        cfg.loss.k
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches_per_epoch = order.chunks(cfg.batch_size).filter(|b| b.len() >= 2).count();
    ensure!(
        batches_per_epoch > 0,
        "training set of {} clips yields no batch of at least 2",
        train_set.len()
    );

    let mut shuffle_rng = derive_rng(cfg.seed, SHUFFLE_STREAM);
    let mut augment_rng = derive_rng(cfg.seed, AUGMENT_STREAM);
    let mut adam = AdamState::new(&model.store);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut monitored: Vec<f32> = Vec::new();
    let mut lr_trace = Vec::new();
    let mut best_store: ParamStore = model.store.clone();
    let mut best_epoch = 0;
    let mut iteration = 0;

    let stop = loop {
        let epoch = history.len() + 1;
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen, mut correct) = (0f64, 0usize, 0usize);
        let mut lr = lr_at(iteration, cfg.total_iterations, cfg.base_lr);
        for idx in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            if iteration >= cfg.total_iterations {
                break;
            }
            let samples: Vec<_> = idx.iter().map(|&i| &train_set.samples[i]).collect();
            let clips: Vec<Tensor> = match cfg.augmentation {
                AugmentStrategy::None => samples.iter().map(|s| s.clip.data.clone()).collect(),
                AugmentStrategy::Less => {
                    let params = AugmentParams::sample_less(&mut augment_rng);
                    samples.iter().map(|s| params.apply(&s.clip.data)).collect()
                }
                AugmentStrategy::More => samples
                    .iter()
                    .map(|s| AugmentParams::sample(&mut augment_rng).apply(&s.clip.data))
                    .collect(),
            };
            let labels: Vec<LabelPair> = samples.iter().map(|s| s.labels).collect();
            lr = lr_at(iteration, cfg.total_iterations, cfg.base_lr);
            lr_trace.push(lr);
            let (loss, preds) = train_step(&mut model, stack_clips(&clips)?, &labels, cfg, &mut adam, lr)
                .map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("epoch {epoch}, iteration {}: {msg}", iteration + 1))
                    }
                    other => other,
                })?;
            iteration += 1;
            loss_sum += loss as f64 * labels.len() as f64;
            seen += labels.len();
            correct += preds.iter().zip(&labels).filter(|(p, l)| p.class == l.categorical).count();
        }
        if seen == 0 {
            break StopReason::IterationBudget;
        }
        let train_loss = (loss_sum / seen as f64) as f32;
        let train_accuracy = correct as f32 / seen as f32;
        let val = val_set
            .map(|v| evaluate(&model, v, &cfg.loss, cfg.batch_size))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss: val.as_ref().map(|v| v.loss),
            val_accuracy: val.as_ref().map(|v| v.accuracy),
            lr,
            iterations: iteration,
        };
        progress(&record);
        monitored.push(record.val_loss.unwrap_or(train_loss));
        history.push(record);

        let verdict = early_stop_check(&monitored, cfg.patience);
        if verdict.best_epoch() == epoch {
            best_store = model.store.clone();
            best_epoch = epoch;
        }
        if iteration >= cfg.total_iterations {
            break StopReason::IterationBudget;
        }
        if verdict.should_stop() {
            break StopReason::EarlyStopping;
        }
        if cfg.target_train_accuracy.is_some_and(|t| train_accuracy >= t) {
            break StopReason::TargetAccuracy;
        }
        if cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break StopReason::MaxEpochs;
        }
    };
    model.store = best_store;
    Ok(TrainedModel {
        model,
        history,
        lr_trace,
        best_epoch,
        stop,
    })
}
