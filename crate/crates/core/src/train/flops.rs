//! Analytic training-cost accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs and a backward pass costs twice
//! its forward pass, so a training step on one sample costs 3 forwards.

use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Model};
use crate::tensor::Scalar;

/// FLOPs of one Eval-mode forward pass on a single sample, counting only the
/// multiply-accumulates of convolution and dense layers.
pub fn forward_flops<T: Scalar>(model: &Model<T>) -> u64 {
    let mut length = model.architecture().input_shape().1;
    let mut flops = 0u64;
    for layer in model.layers() {
        match *layer {
            Layer::Conv1d { weight, .. } => {
                let s = model.params()[weight].value.shape();
                let out_len = length + 1 - s[2];
                flops += 2 * (s[0] * s[1] * s[2] * out_len) as u64;
                length = out_len;
            }
            Layer::Linear { weight, .. } => {
                let s = model.params()[weight].value.shape();
                flops += 2 * (s[0] * s[1]) as u64;
            }
            Layer::MaxPool1d { size, stride } => length = (length - size) / stride + 1,
            Layer::Relu | Layer::Dropout { .. } | Layer::Flatten => {}
        }
    }
    flops
}

/// Named cost phases of an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub phases: Vec<(String, u64)>,
}

impl FlopLedger {
    pub fn total(&self) -> u64 {
        self.phases.iter().map(|(_, f)| f).sum()
    }

    fn push(mut self, name: &str, flops: u64) -> Self {
        self.phases.push((name.to_string(), flops));
        self
    }

    /// One supervised training run.
    pub fn baseline(forward: u64, samples: usize, epochs: usize) -> Self {
        Self::default().push("teacher training", training(forward, samples, epochs))
    }

    /// Teacher training followed by student training with `n` teacher forwards per sample.
    pub fn ssd(forward: u64, samples: usize, teacher_epochs: usize, student_epochs: usize, n: usize) -> Self {
        Self::baseline(forward, samples, teacher_epochs)
            .push("student training", training(forward, samples, student_epochs))
            .push(
                "stochastic teacher passes",
                forward * n as u64 * (samples * student_epochs) as u64,
            )
    }

    /// `members` independent training runs.
    pub fn ensemble(forward: u64, samples: usize, epochs: usize, members: usize) -> Self {
        Self::default().push("member training", members as u64 * training(forward, samples, epochs))
    }

    /// A shared pretraining run plus `members` fine-tuning runs.
    pub fn soup(forward: u64, samples: usize, pretrain_epochs: usize, finetune_epochs: usize, members: usize) -> Self {
        Self::default()
            .push("pretraining", training(forward, samples, pretrain_epochs))
            .push(
                "member fine-tuning",
                members as u64 * training(forward, samples, finetune_epochs),
            )
    }
}

fn training(forward: u64, samples: usize, epochs: usize) -> u64 {
    3 * forward * (samples * epochs) as u64
}
