use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{DropoutMode, ForwardCtx, Model};
use crate::rng::{RngStream, STUDENT_PASS};
use crate::ssd::{sgkd_step, SsdConfig, STUDENT_TAG};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::train::checkpoint::Checkpoint;
use crate::train::metrics::predict;
use crate::train::optim::{Optimizer, OptimizerConfig};
use crate::train::sched::{Monitor, Scheduler, SchedulerConfig};

const SHUFFLE_TAG: u64 = 0x5BF1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    /// Stop once validation loss has not improved for this many epochs.
    pub early_stopping: Option<usize>,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(0.05),
            scheduler: SchedulerConfig::ReduceOnPlateau {
                patience: 10,
                factor: 0.1,
                monitor: Monitor::TrainLoss,
            },
            early_stopping: None,
            eval_batch_size: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be ≥ 1"));
        }
        if self.early_stopping == Some(0) {
            return Err(Error::config("early-stopping patience must be ≥ 1"));
        }
        self.optimizer.validate()?;
        self.scheduler.validate()
    }
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_task_loss: f64,
    pub train_dist_loss: f64,
    /// NaN when there is no validation split.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// One row of the per-step distillation diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_task: f64,
    pub l_dist: f64,
    pub l_total: f64,
    pub mean_kept: f64,
    pub mean_alpha_max: f64,
    pub rep_variance: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar = f32> {
    /// Highest validation accuracy seen (the final model without a validation split).
    pub best: Model<T>,
    /// Epoch that produced `best`; 0 means the initial parameters.
    pub best_epoch: usize,
    pub last: Model<T>,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.best)
    }
}

struct StepLosses<T: Scalar> {
    total: f64,
    task: f64,
    dist: f64,
    grads: IndexMap<String, Tensor<T>>,
}

struct Batch<'a, T: Scalar> {
    x: &'a Tensor<T>,
    labels: &'a [usize],
    ids: &'a [u64],
    rng: &'a RngStream,
}

fn fit<T: Scalar>(
    mut model: Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut step: impl FnMut(&Model<T>, Batch<'_, T>) -> Result<StepLosses<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let monitor = cfg.scheduler.monitor();
    if val.is_empty() && (cfg.early_stopping.is_some() || matches!(monitor, Some(Monitor::ValLoss | Monitor::ValAccuracy))) {
        return Err(Error::config("validation-driven scheduling or early stopping needs a validation split"));
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut sched = Scheduler::new(cfg.scheduler.clone(), cfg.optimizer.lr)?;
    let root = RngStream::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_val_loss = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let rng = root.child(epoch as u64);
        let batches = shuffled_batches(train.len(), cfg.batch_size, &rng.child(SHUFFLE_TAG))?;
        let lr = opt.lr();
        let (mut total, mut task, mut dist) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let (x, labels) = train.batch::<T>(idx)?;
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let out = step(&model, Batch { x: &x, labels: &labels, ids: &ids, rng: &rng })?;
            if !out.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("loss became {}", out.total),
                });
            }
            opt.step(&mut model, &out.grads)?;
            let w = idx.len() as f64;
            total += out.total * w;
            task += out.task * w;
            dist += out.dist * w;
        }
        let m = train.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (preds, loss) = predict(&model, val, cfg.eval_batch_size)?;
            let correct = preds.iter().zip(val.labels()).filter(|(p, y)| p == y).count();
            (loss, correct as f64 / val.len() as f64)
        };
        if !val_loss.is_nan() && !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("validation loss became {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / m,
            train_task_loss: task / m,
            train_dist_loss: dist / m,
            val_loss,
            val_accuracy,
        });

        if val.is_empty() || val_accuracy > best_acc {
            best_acc = val_accuracy;
            best = model.clone();
            best_epoch = epoch;
        }
        let metric = match monitor {
            Some(Monitor::ValLoss) => val_loss,
            Some(Monitor::ValAccuracy) => val_accuracy,
            _ => total / m,
        };
        opt.set_lr(sched.epoch_end(epoch - 1, metric));
        if let Some(patience) = cfg.early_stopping {
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

fn supervised_step<T: Scalar>(model: &Model<T>, b: Batch<'_, T>, rate: Option<f64>) -> Result<StepLosses<T>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(b.x.clone());
    let mut ctx = ForwardCtx::stochastic(DropoutMode::Train, b.rng.child(STUDENT_TAG), b.ids, STUDENT_PASS);
    if let Some(p) = rate {
        ctx = ctx.with_rate(p);
    }
    let out = model.forward_tape(&mut tape, &params, x, &ctx)?;
    let loss = tape.softmax_cross_entropy(out.logits, b.labels)?;
    let value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?.into_named();
    Ok(StepLosses {
        total: value,
        task: value,
        dist: 0.0,
        grads,
    })
}

/// Supervised training with the model's own dropout rate; keeps the
/// best-by-validation parameters.
pub fn train_teacher<T: Scalar>(model: Model<T>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    fit(model, train, val, cfg, |m, b| supervised_step(m, b, None))
}

/// Supervised fine-tuning with an optional dropout-rate override. With the
/// student's rate and the same seed, this is the λ = 0 counterpart of
/// [`train_student`].
pub fn fine_tune<T: Scalar>(
    model: Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    dropout: Option<f64>,
) -> Result<TrainOutcome<T>> {
    fit(model, train, val, cfg, |m, b| supervised_step(m, b, dropout))
}

/// Trains `student` against a frozen `teacher` with student-guided
/// distillation. `on_step` receives one diagnostics record per optimizer step.
pub fn train_student<T: Scalar>(
    student: Model<T>,
    teacher: &Model<T>,
    train: &Dataset,
    val: &Dataset,
    ssd: &SsdConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(StepRecord),
) -> Result<TrainOutcome<T>> {
    ssd.validate()?;
    if !teacher.is_frozen() {
        return Err(Error::Contract("teacher must be frozen before student training".into()));
    }
    let mut counter = 0;
    fit(student, train, val, cfg, |m, b| {
        let out = sgkd_step(m, teacher, b.x, b.labels, b.ids, ssd, b.rng)?;
        counter += 1;
        on_step(StepRecord {
            step: counter,
            l_task: out.loss_task,
            l_dist: out.loss_dist,
            l_total: out.loss_total,
            mean_kept: out.diagnostics.mean_kept(),
            mean_alpha_max: out.diagnostics.mean_alpha_max(),
            rep_variance: out.diagnostics.rep_variance,
        });
        Ok(StepLosses {
            total: out.loss_total,
            task: out.loss_task,
            dist: out.loss_dist,
            grads: out.gradients,
        })
    })
}

/// A trainable copy of the teacher's parameters.
pub fn init_student_from_teacher<T: Scalar>(teacher: &Model<T>) -> Model<T> {
    let mut student = teacher.clone();
    student.unfreeze();
    student
}

/// Builds `template`'s architecture and loads `checkpoint` into it as a trainable student.
pub fn init_student_from_checkpoint<T: Scalar>(template: &Model<T>, checkpoint: &Checkpoint) -> Result<Model<T>> {
    let mut student = template.clone();
    checkpoint.apply_to(&mut student)?;
    student.unfreeze();
    Ok(student)
}

/// A frozen copy for use as a distillation teacher.
pub fn frozen<T: Scalar>(model: &Model<T>) -> Model<T> {
    let mut m = model.clone();
    m.freeze();
    m
}
