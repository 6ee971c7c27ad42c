use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantity a plateau scheduler watches; lower is better for losses, higher for accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    TrainLoss,
    ValLoss,
    ValAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerConfig {
    /// Multiplies the rate by `factor` once the monitored value has failed to
    /// improve (relative threshold 1e-4) for more than `patience` epochs.
    ReduceOnPlateau {
        patience: usize,
        factor: f64,
        #[serde(default = "default_monitor")]
        monitor: Monitor,
    },
    /// Cosine decay from the base rate to 0 over `t_max` epochs.
    Cosine { t_max: usize },
    None,
}

fn default_monitor() -> Monitor {
    Monitor::TrainLoss
}

const PLATEAU_THRESHOLD: f64 = 1e-4;

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SchedulerConfig::ReduceOnPlateau { patience, factor, .. } => {
                if patience < 1 {
                    return Err(Error::config("plateau patience must be ≥ 1"));
                }
                if !(factor > 0.0 && factor < 1.0) {
                    return Err(Error::config(format!("plateau factor must lie in (0, 1), got {factor}")));
                }
                Ok(())
            }
            SchedulerConfig::Cosine { t_max } if t_max == 0 => Err(Error::config("cosine t_max must be ≥ 1")),
            _ => Ok(()),
        }
    }

    pub fn monitor(&self) -> Option<Monitor> {
        match self {
            SchedulerConfig::ReduceOnPlateau { monitor, .. } => Some(*monitor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    base_lr: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig, base_lr: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            base_lr,
            lr: base_lr,
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the end of epoch `epoch` (0-based) and returns the rate for the next one.
    pub fn epoch_end(&mut self, epoch: usize, metric: f64) -> f64 {
        match self.cfg {
            SchedulerConfig::ReduceOnPlateau { patience, factor, monitor } => {
                // Work in "lower is better" terms.
                let value = if monitor == Monitor::ValAccuracy { -metric } else { metric };
                let improved = match self.best {
                    None => true,
                    Some(best) => value < best - PLATEAU_THRESHOLD * best.abs(),
                };
                if improved {
                    self.best = Some(value);
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs > patience {
                        self.lr *= factor;
                        self.bad_epochs = 0;
                    }
                }
            }
            SchedulerConfig::Cosine { t_max } => {
                let t = ((epoch + 1) as f64).min(t_max as f64);
                self.lr = 0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t / t_max as f64).cos());
            }
            SchedulerConfig::None => {}
        }
        self.lr
    }
}
