use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::ssd::SsdConfig;
use crate::train::{OptimizerConfig, SchedulerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Har,
    Ucr,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 3,
            length: 64,
            train_samples: 600,
            test_samples: 600,
            noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// HAR: the extracted archive directory. UCR: the archive root holding
    /// `<name>/<name>_TRAIN.tsv`. Falls back to the data-root directory.
    pub path: Option<PathBuf>,
    /// UCR dataset name.
    pub name: Option<String>,
    /// Stratified fraction of the training split held out for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Har,
            path: None,
            name: None,
            val_fraction: 0.1,
            split_seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Training-time dropout rate of the teacher.
    pub dropout: f64,
    /// Hidden widths of the MLP; ignored by the CNN.
    pub hidden: Vec<usize>,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cnn,
            dropout: 0.2,
            hidden: vec![128, 64],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, channels: usize, length: usize, classes: usize) -> Architecture {
        match self.kind {
            ModelKind::Cnn => Architecture::Cnn1d {
                channels,
                length,
                classes,
                dropout: self.dropout,
            },
            ModelKind::Mlp => Architecture::Mlp {
                channels,
                length,
                hidden: self.hidden.clone(),
                classes,
                dropout: self.dropout,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copy of the trained teacher's parameters.
    Teacher,
    /// Fresh initialization from the student seed.
    Random,
}

/// Student training reuses the teacher recipe; these fields override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub init: StudentInit,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            init: StudentInit::Teacher,
            epochs: None,
            seed: None,
        }
    }
}

/// Sweep axes; an absent axis stays at the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub p_teacher: Option<Vec<f64>>,
    pub n: Option<Vec<usize>>,
    pub epsilon: Option<Vec<f64>>,
    /// `false` replaces the attention temperature with 1.
    pub attention_regularization: Option<Vec<bool>>,
    pub init_with_teacher: Option<Vec<bool>>,
    pub seeds: Option<Vec<u64>>,
    /// Training samples used to measure representation variance.
    pub variance_probe: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Ensemble and soup size; member 0 is the baseline teacher.
    pub members: usize,
    pub soup_finetune_epochs: usize,
    pub soup_optimizer: OptimizerConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            members: 25,
            soup_finetune_epochs: 10,
            soup_optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: StudentConfig,
    pub ssd: SsdConfig,
    pub ablation: AblationConfig,
    pub compare: CompareConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(Error::config(format!(
                "data.val_fraction must lie in [0, 1), got {}",
                d.val_fraction
            )));
        }
        if d.kind == DataKind::Ucr && d.name.is_none() {
            return Err(Error::config("data.name is required for UCR datasets"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.model.dropout
            )));
        }
        self.teacher.validate()?;
        self.student_train_config().validate()?;
        self.ssd.validate()?;
        if self.compare.members == 0 {
            return Err(Error::config("compare.members must be ≥ 1"));
        }
        self.compare.soup_optimizer.validate()?;
        if self.output.formats.is_empty() {
            return Err(Error::config("output.formats must name at least one format"));
        }
        Ok(())
    }

    /// The teacher recipe with the student overrides applied.
    pub fn student_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.student.epochs.unwrap_or(self.teacher.epochs),
            seed: self.student.seed.unwrap_or(self.teacher.seed),
            ..self.teacher.clone()
        }
    }

    /// Recipe for fine-tuning soup member `i` from the teacher.
    pub fn soup_train_config(&self, i: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.compare.soup_finetune_epochs,
            optimizer: self.compare.soup_optimizer.clone(),
            scheduler: SchedulerConfig::None,
            early_stopping: None,
            seed: self.teacher.seed.wrapping_add(1 + i as u64),
            ..self.teacher.clone()
        }
    }
}
