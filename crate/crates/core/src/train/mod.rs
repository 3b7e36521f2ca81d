//! Weighted cross-entropy training with Adam, clipping, plateau decay and
//! early stopping, plus fold-level pretraining, fine-tuning and evaluation.

mod checkpoint;
mod run;

use autodiff::{
    adam_step, clip_gradients, AutodiffError, EarlyStopping, Graph, Mode, OptimConfig, PlateauScheduler,
    StopDecision, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{window_sequences, DataError, SequenceWindow, SleepStage, SubjectRecord, WindowMode};
use crate::metrics::MetricsError;
use crate::model::{ModelError, SleepStager};
use crate::seed::derive_seed;
use crate::stratify::{PlanError, Violation};

pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor, CHECKPOINT_VERSION};
pub(crate) use run::pool;
pub use run::{evaluate, finetune, pretrain, pretrain_fold, Evaluation, FinetuneOutcome, RunKind, RunResult};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("plan failed leakage verification: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    PlanViolations(Vec<Violation>),
    #[error("leakage firewall: {0}")]
    Leakage(String),
    #[error("leakage firewall: fold expects checkpoint {expected} but checkpoint {found} was supplied")]
    CheckpointMismatch { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub min_improvement: f64,
    pub early_stopping: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Training window stride; `None` means non-overlapping windows.
    pub train_stride: Option<usize>,
    pub freeze_feature_extractor: bool,
    /// Fine-tuning reuses the checkpoint's normalization instead of
    /// recomputing it from the fold's training subjects.
    pub inherit_norm_stats: bool,
}

impl TrainConfig {
    fn from_optim(phase: Phase, o: OptimConfig, max_epochs: usize) -> Self {
        TrainConfig {
            phase,
            learning_rate: o.learning_rate,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_epsilon: o.adam_epsilon,
            max_grad_norm: o.max_grad_norm,
            plateau_factor: o.plateau_factor,
            plateau_patience: o.plateau_patience,
            early_stop_patience: o.early_stop_patience,
            min_improvement: o.min_improvement,
            early_stopping: true,
            batch_size: 32,
            max_epochs,
            seed: 0,
            train_stride: None,
            freeze_feature_extractor: false,
            inherit_norm_stats: false,
        }
    }

    pub fn pretrain() -> Self {
        Self::from_optim(Phase::Pretrain, OptimConfig::pretrain(), 100)
    }

    pub fn finetune() -> Self {
        Self::from_optim(Phase::Finetune, OptimConfig::finetune(), 50)
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            max_grad_norm: self.max_grad_norm,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            min_improvement: self.min_improvement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim().validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.train_stride == Some(0) {
            return Err(TrainError::Config("train_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-frequency weights `N / (C · n_i)` where `C` counts only the
/// classes present. Absent classes get weight 0.
pub fn class_weights_from_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(TrainError::Config("class weights need at least one label".into()));
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    Ok(counts.iter().map(|&c| if c == 0 { 0.0 } else { n as f64 / (present * c as f64) }).collect())
}

pub fn class_weights(labels: impl IntoIterator<Item = SleepStage>) -> Result<Vec<f64>> {
    let mut counts = [0u64; SleepStage::COUNT];
    for l in labels {
        counts[l.index()] += 1;
    }
    class_weights_from_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss, or the training loss when there is no validation set.
    pub monitor_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub monitored_validation: bool,
    pub stopped_early: bool,
    /// Eval-mode weighted loss on the training windows before and after training.
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
}

/// A record's windows paired with its index in a record slice.
fn windows(records: &[SubjectRecord], seq_len: usize, mode: WindowMode) -> Vec<(usize, SequenceWindow)> {
    records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| window_sequences(r.epochs.len(), seq_len, mode).into_iter().map(move |w| (i, w)))
        .collect()
}

struct Batch {
    input: Tensor<f32>,
    targets: Vec<usize>,
    /// Positions that count toward loss or metrics.
    mask: Vec<bool>,
}

fn assemble(records: &[SubjectRecord], items: &[&(usize, SequenceWindow)], seq_len: usize, epoch_len: usize, shape: [usize; 2]) -> Result<Batch> {
    let b = items.len();
    let mut data = vec![0.0f32; b * seq_len * epoch_len];
    let mut targets = vec![0usize; b * seq_len];
    let mut mask = vec![false; b * seq_len];
    for (k, (ri, w)) in items.iter().enumerate() {
        let r = &records[*ri];
        for (t, e) in r.epochs[w.range()].iter().enumerate() {
            let at = (k * seq_len + t) * epoch_len;
            data[at..at + epoch_len].copy_from_slice(&e.signal);
            targets[k * seq_len + t] = e.stage.index();
        }
        for (t, &s) in w.scored.iter().enumerate() {
            mask[k * seq_len + t] = s;
        }
    }
    let input = Tensor::new(vec![b, seq_len, shape[0], shape[1]], data)?;
    Ok(Batch { input, targets, mask })
}

/// Eval-mode logits for every window, in batches.
fn eval_logits(
    model: &SleepStager<f32>,
    records: &[SubjectRecord],
    items: &[(usize, SequenceWindow)],
    batch_size: usize,
) -> Result<Vec<(Batch, Vec<f32>)>> {
    let c = model.config();
    let shape = [c.n_channels, c.samples_per_epoch];
    let epoch_len = shape[0] * shape[1];
    let refs: Vec<&(usize, SequenceWindow)> = items.iter().collect();
    refs.chunks(batch_size)
        .map(|chunk| {
            let batch = assemble(records, chunk, c.seq_len, epoch_len, shape)?;
            let logits = model.predict(batch.input.clone())?.into_data();
            Ok((batch, logits))
        })
        .collect()
}

/// Weighted NLL sum and weight sum over masked positions, in f64.
fn weighted_nll(logits: &[f32], targets: &[usize], mask: &[bool], weights: &[f64]) -> (f64, f64) {
    let c = weights.len();
    let (mut num, mut den) = (0.0, 0.0);
    for (row, (&t, &m)) in logits.chunks(c).zip(targets.iter().zip(mask)) {
        if !m {
            continue;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        let w = weights[t];
        num += w * (lse - row[t] as f64);
        den += w;
    }
    (num, den)
}

/// Eval-mode weighted loss over the given windows, or `None` when no
/// position carries weight.
fn eval_loss(
    model: &SleepStager<f32>,
    records: &[SubjectRecord],
    items: &[(usize, SequenceWindow)],
    weights: &[f64],
    batch_size: usize,
) -> Result<Option<f64>> {
    let (mut num, mut den) = (0.0, 0.0);
    for (batch, logits) in eval_logits(model, records, items, batch_size)? {
        let (n, d) = weighted_nll(&logits, &batch.targets, &batch.mask, weights);
        num += n;
        den += d;
    }
    Ok((den > 0.0).then(|| num / den))
}

/// Trains `model` in place on already-normalized records and restores the
/// parameters from the best monitored epoch.
pub fn fit(
    model: &mut SleepStager<f32>,
    train: &[SubjectRecord],
    validation: &[SubjectRecord],
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let mc = model.config().clone();
    let stride = cfg.train_stride.unwrap_or(mc.seq_len);
    let train_windows = windows(train, mc.seq_len, WindowMode::Train { stride });
    let val_windows = windows(validation, mc.seq_len, WindowMode::Eval);
    let shape = [mc.n_channels, mc.samples_per_epoch];
    let epoch_len = shape[0] * shape[1];

    let mut log = TrainingLog { monitored_validation: !val_windows.is_empty(), ..TrainingLog::default() };
    if cfg.max_epochs == 0 {
        return Ok(log);
    }
    if train_windows.is_empty() {
        return Err(TrainError::Config(format!(
            "no training subject has at least {} scored epochs",
            mc.seq_len
        )));
    }
    if model.bn_initialized() {
        log.initial_train_loss = eval_loss(model, train, &train_windows, class_weights, cfg.batch_size)?;
    }

    model.freeze_feature_extractor(cfg.freeze_feature_extractor);
    let mut optim = cfg.optim();
    let mut plateau = PlateauScheduler::new(&optim);
    let mut stopper = EarlyStopping::new(&optim);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut order: Vec<&(usize, SequenceWindow)> = train_windows.iter().collect();
    let weights_f32: Vec<f32> = class_weights.iter().map(|&w| w as f32).collect();
    let mut best = None;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble(train, chunk, mc.seq_len, epoch_len, shape)?;
            let batch_weight: f64 = batch.targets.iter().map(|&t| class_weights[t]).sum();
            if batch_weight <= 0.0 {
                continue;
            }
            let mut g = Graph::new();
            let x = g.input(batch.input);
            let logits = model.forward(&mut g, x, Mode::Train, &mut dropout_rng)?;
            let n = batch.targets.len();
            let flat = g.reshape(logits, vec![n, mc.n_classes])?;
            let loss = g.weighted_cross_entropy(flat, &batch.targets, &weights_f32, None)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged(format!("loss is {value} at epoch {epoch}")));
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            clip_gradients(&mut model.store, optim.max_grad_norm);
            adam_step(&mut model.store, &optim);
            loss_sum += value * batch_weight;
            weight_sum += batch_weight;
        }
        let train_loss = loss_sum / weight_sum.max(f64::MIN_POSITIVE);
        let monitor_loss = if log.monitored_validation {
            eval_loss(model, validation, &val_windows, class_weights, cfg.batch_size)?.unwrap_or(train_loss)
        } else {
            train_loss
        };
        log.epochs.push(EpochLog { epoch, train_loss, monitor_loss, learning_rate: optim.learning_rate });
        let (improved, decision) = stopper.check(monitor_loss);
        if improved || best.is_none() {
            best = Some((epoch, model.store.snapshot()));
        }
        optim.learning_rate = plateau.step(monitor_loss);
        if cfg.early_stopping && decision == StopDecision::Stop {
            log.stopped_early = true;
            break;
        }
    }
    if let Some((epoch, snapshot)) = best {
        model.store.restore(&snapshot)?;
        log.best_epoch = Some(epoch);
    }
    model.freeze_feature_extractor(false);
    log.final_train_loss = eval_loss(model, train, &train_windows, class_weights, cfg.batch_size)?;
    Ok(log)
}

/// Argmax predictions for every scored epoch of each record, in epoch order.
pub fn predict_records(
    model: &SleepStager<f32>,
    records: &[SubjectRecord],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let c = model.config();
    let items = windows(records, c.seq_len, WindowMode::Eval);
    let mut preds: Vec<Vec<Option<usize>>> = records.iter().map(|r| vec![None; r.epochs.len()]).collect();
    let mut cursor = 0;
    for (batch, logits) in eval_logits(model, records, &items, batch_size.max(1))? {
        let n_windows = batch.targets.len() / c.seq_len;
        for k in 0..n_windows {
            let (ri, w) = &items[cursor + k];
            for t in 0..c.seq_len {
                if !w.scored[t] {
                    continue;
                }
                let pos = k * c.seq_len + t;
                let row = &logits[pos * c.n_classes..(pos + 1) * c.n_classes];
                // First maximum wins on ties.
                let arg = (0..c.n_classes).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                preds[*ri][w.start + t] = Some(arg);
            }
        }
        cursor += n_windows;
    }
    Ok(preds
        .into_iter()
        .map(|p| p.into_iter().map(|x| x.expect("eval windows cover every epoch")).collect())
        .collect())
}
