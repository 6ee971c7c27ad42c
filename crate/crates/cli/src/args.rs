use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssd_core::experiment::{ExperimentConfig, StudentInit};
use ssd_core::ssd::SelectionScheme;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ssd", version, about = "Stochastic self-distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the baseline teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a student from a trained teacher checkpoint.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ssd: SsdFlags,
        /// Teacher checkpoint; defaults to `teacher.ssdt` in the output directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Sweep the declared ablation axes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ssd: SsdFlags,
        /// Reuse a trained teacher instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Baseline, ensembles, soups and SSD side by side.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ssd: SsdFlags,
        /// Reuse a trained teacher as the baseline and ensemble member 0.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Ensemble and soup size.
        #[arg(long)]
        members: Option<usize>,
    },
    /// Write distillation-time dropout features of a checkpoint to CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Passes per sample.
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Dropout rate of the passes.
        #[arg(long, default_value_t = 0.2)]
        p_teacher: f64,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Flags shared by every command; each overrides the matching config field.
#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory (`output.dir`).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Dataset location (`data.path`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Model initialization and teacher shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Teacher epochs (`teacher.epochs`).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of the teacher and student optimizer.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selection {
    Dynamic,
    TopK,
    DistillAll,
}

/// Overrides of the `[ssd]` and `[student]` sections.
#[derive(Debug, Args)]
pub struct SsdFlags {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p_teacher: Option<f64>,
    #[arg(long)]
    pub p_student: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub selection: Option<Selection>,
    /// Rows kept by `--selection top-k`.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub student_epochs: Option<usize>,
    #[arg(long)]
    pub student_seed: Option<u64>,
    /// Start the student from the teacher or from a fresh initialization.
    #[arg(long, value_enum)]
    pub student_init: Option<InitFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitFlag {
    Teacher,
    Random,
}

impl Common {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(dir) = &self.output {
            cfg.output.dir = dir.clone();
        }
        if let Some(dir) = &self.data_dir {
            cfg.data.path = Some(dir.clone());
        }
        if let Some(seed) = self.seed {
            cfg.model.seed = seed;
            cfg.teacher.seed = seed;
        }
        if let Some(e) = self.epochs {
            cfg.teacher.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.teacher.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.teacher.optimizer.lr = lr;
        }
    }
}

impl SsdFlags {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        let s = &mut cfg.ssd;
        macro_rules! set {
            ($field:ident, $target:expr) => {
                if let Some(v) = self.$field {
                    $target = v;
                }
            };
        }
        set!(n, s.n);
        set!(p_teacher, s.p_teacher);
        set!(p_student, s.p_student);
        set!(temperature, s.temperature);
        set!(epsilon, s.epsilon);
        set!(lambda, s.lambda);
        match (self.selection, self.k) {
            (Some(Selection::TopK), Some(k)) => s.selection = SelectionScheme::TopK(k),
            (Some(Selection::TopK), None) => {
                return Err(CliError::Config("--selection top-k needs --k".into()));
            }
            (_, Some(_)) => {
                return Err(CliError::Config("--k only applies to --selection top-k".into()));
            }
            (Some(Selection::Dynamic), None) => s.selection = SelectionScheme::Dynamic,
            (Some(Selection::DistillAll), None) => s.selection = SelectionScheme::DistillAll,
            (None, None) => {}
        }
        if let Some(e) = self.student_epochs {
            cfg.student.epochs = Some(e);
        }
        if let Some(seed) = self.student_seed {
            cfg.student.seed = Some(seed);
        }
        if let Some(init) = self.student_init {
            cfg.student.init = match init {
                InitFlag::Teacher => StudentInit::Teacher,
                InitFlag::Random => StudentInit::Random,
            };
        }
        Ok(())
    }
}
