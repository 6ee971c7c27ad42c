//! Experiment orchestration shared by the command-line tool and the
//! acceptance suite: data preparation, teacher and student runs, ablation
//! grids, the method comparison table and embedding export.

mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    AblationConfig, CompareConfig, DataConfig, DataKind, ExperimentConfig, ModelConfig, ModelKind, OutputConfig,
    ReportFormat, StudentConfig, StudentInit, SyntheticConfig,
};

use crate::baselines::{greedy_soup, uniform_soup, CombinationRule, Ensemble};
use crate::data::{load_uci_har, load_ucr_pair, standardize, stratified_split, synth_generate, ChannelStats, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::parallel;
use crate::rng::RngStream;
use crate::ssd::{generate_stochastic_representations, representation_variance, SsdConfig};
use crate::train::{
    evaluate, evaluate_ensemble, fine_tune, forward_flops, frozen, init_student_from_teacher, train_student,
    train_teacher, FlopLedger, Metrics, StepRecord, TrainOutcome,
};

/// Environment variable naming the dataset root used when a config gives no path.
pub const DATA_DIR_ENV: &str = "SSD_DATA_DIR";

const HAR_DIR_NAME: &str = "UCI HAR Dataset";
const EMBED_TAG: u64 = 0xE3BD;
const VARIANCE_TAG: u64 = 0x7A21;
const DEFAULT_VARIANCE_PROBE: usize = 256;

/// Standardized splits; statistics come from `train` alone.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stats: ChannelStats,
}

fn dataset_root(cfg: &DataConfig, data_dir: Option<&Path>) -> Result<PathBuf> {
    cfg.path
        .clone()
        .or_else(|| data_dir.map(Path::to_path_buf))
        .ok_or_else(|| Error::config(format!("data.path is unset and {DATA_DIR_ENV} is not set")))
}

/// Loads, splits and standardizes the configured dataset.
pub fn prepare_data(cfg: &DataConfig, data_dir: Option<&Path>) -> Result<PreparedData> {
    let (train_full, test) = match cfg.kind {
        DataKind::Har => {
            let root = dataset_root(cfg, data_dir)?;
            let nested = root.join(HAR_DIR_NAME);
            let root = if nested.is_dir() { nested } else { root };
            let splits = load_uci_har(&root)?;
            (splits.train, splits.test)
        }
        DataKind::Ucr => {
            let root = dataset_root(cfg, data_dir)?;
            let name = cfg
                .name
                .as_deref()
                .ok_or_else(|| Error::config("data.name is required for UCR datasets"))?;
            let dir = root.join(name);
            load_ucr_pair(&dir.join(format!("{name}_TRAIN.tsv")), &dir.join(format!("{name}_TEST.tsv")))?
        }
        DataKind::Synthetic => {
            let s = &cfg.synthetic;
            let spec = SynthSpec {
                classes: s.classes,
                channels: s.channels,
                length: s.length,
                samples: s.train_samples + s.test_samples,
                noise: s.noise,
            };
            let all = synth_generate(&spec, s.seed)?;
            let train: Vec<usize> = (0..s.train_samples).collect();
            let test: Vec<usize> = (s.train_samples..all.len()).collect();
            (all.subset(&train), all.subset(&test))
        }
    };
    let (train, val) = stratified_split(&train_full, cfg.val_fraction, cfg.split_seed)?;
    let stats = ChannelStats::compute(&train);
    Ok(PreparedData {
        train: standardize(&train, &stats)?,
        val: standardize(&val, &stats)?,
        test: standardize(&test, &stats)?,
        stats,
    })
}

/// The configured architecture, initialized from `seed`.
pub fn build_model(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<Model> {
    let d = &data.train;
    cfg.model.architecture(d.channels(), d.length(), d.classes()).build(seed)
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub outcome: TrainOutcome,
    pub test: Metrics,
    pub flops: FlopLedger,
}

impl TeacherRun {
    /// Frozen copy of the selected parameters.
    pub fn teacher(&self) -> Model {
        frozen(&self.outcome.best)
    }
}

pub fn run_teacher(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TeacherRun> {
    let model = build_model(cfg, data, cfg.model.seed)?;
    let f = forward_flops(&model);
    let outcome = train_teacher(model, &data.train, &data.val, &cfg.teacher)?;
    let test = evaluate(&outcome.best, &data.test, cfg.teacher.eval_batch_size)?;
    Ok(TeacherRun {
        outcome,
        test,
        flops: FlopLedger::baseline(f, data.train.len(), cfg.teacher.epochs),
    })
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub outcome: TrainOutcome,
    pub test: Metrics,
    pub steps: Vec<StepRecord>,
    pub flops: FlopLedger,
}

/// Trains a student against `teacher` with `ssd`; `seed` replaces the student
/// recipe's seed when given and also seeds a random initialization.
pub fn run_student(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: &Model,
    ssd: &SsdConfig,
    init: StudentInit,
    seed: Option<u64>,
) -> Result<StudentRun> {
    let mut train_cfg = cfg.student_train_config();
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let student = match init {
        StudentInit::Teacher => init_student_from_teacher(teacher),
        StudentInit::Random => {
            let m = build_model(cfg, data, train_cfg.seed.wrapping_add(cfg.model.seed).wrapping_add(1))?;
            crate::nn::check_compatible(teacher, &m)?;
            m
        }
    };
    let f = forward_flops(teacher);
    let teacher = frozen(teacher);
    let mut steps = Vec::new();
    let outcome = train_student(student, &teacher, &data.train, &data.val, ssd, &train_cfg, |r| steps.push(r))?;
    let test = evaluate(&outcome.best, &data.test, train_cfg.eval_batch_size)?;
    Ok(StudentRun {
        outcome,
        test,
        steps,
        flops: FlopLedger::ssd(f, data.train.len(), cfg.teacher.epochs, train_cfg.epochs, ssd.n),
    })
}

/// Mean per-dimension variance of `n` distillation-time passes over the first
/// `probe` training samples.
pub fn probe_variance(teacher: &Model, data: &Dataset, p_teacher: f64, n: usize, probe: usize, seed: u64) -> Result<f64> {
    let count = probe.min(data.len());
    if count == 0 {
        return Err(Error::Data("variance probe needs at least one sample".into()));
    }
    let idx: Vec<usize> = (0..count).collect();
    let (x, _) = data.batch::<f32>(&idx)?;
    let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
    let ssd = SsdConfig {
        n,
        p_teacher,
        ..SsdConfig::default()
    };
    let set = generate_stochastic_representations(&frozen(teacher), &x, &ids, &ssd, &RngStream::new(seed).child(VARIANCE_TAG))?;
    representation_variance(&set)
}

/// One grid point of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub p_teacher: f64,
    pub n: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub init: StudentInit,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub p_teacher: f64,
    pub n: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub init: StudentInit,
    pub seed: u64,
    pub accuracy: f64,
    /// NaN when `n` is 1.
    pub rep_variance: f64,
    pub mean_kept: f64,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(Error::config(format!("ablation.{name} is an empty axis"))),
        Some(v) => Ok(v.clone()),
    }
}

/// Cartesian product of the declared axes, in the order p_T, n, ε,
/// attention regularization, initialization, seed.
pub fn ablation_grid(cfg: &ExperimentConfig) -> Result<Vec<AblationPoint>> {
    let a = &cfg.ablation;
    let declared = [
        a.p_teacher.is_some(),
        a.n.is_some(),
        a.epsilon.is_some(),
        a.attention_regularization.is_some(),
        a.init_with_teacher.is_some(),
        a.seeds.is_some(),
    ];
    if !declared.contains(&true) {
        return Err(Error::config("ablation grid is empty: declare at least one sweep axis"));
    }
    let base_seed = cfg.student_train_config().seed;
    let p_axis = axis("p_teacher", &a.p_teacher, cfg.ssd.p_teacher)?;
    let n_axis = axis("n", &a.n, cfg.ssd.n)?;
    let e_axis = axis("epsilon", &a.epsilon, cfg.ssd.epsilon)?;
    let h_axis = axis("attention_regularization", &a.attention_regularization, true)?;
    let i_axis = axis("init_with_teacher", &a.init_with_teacher, cfg.student.init == StudentInit::Teacher)?;
    let s_axis = axis("seeds", &a.seeds, base_seed)?;
    let mut grid = Vec::new();
    for &p_teacher in &p_axis {
        for &n in &n_axis {
            for &epsilon in &e_axis {
                for &reg in &h_axis {
                    for &from_teacher in &i_axis {
                        for &seed in &s_axis {
                            let point = AblationPoint {
                                p_teacher,
                                n,
                                epsilon,
                                temperature: if reg { cfg.ssd.temperature } else { 1.0 },
                                init: if from_teacher { StudentInit::Teacher } else { StudentInit::Random },
                                seed,
                            };
                            point_config(&cfg.ssd, &point).validate()?;
                            grid.push(point);
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}

fn point_config(base: &SsdConfig, p: &AblationPoint) -> SsdConfig {
    SsdConfig {
        p_teacher: p.p_teacher,
        n: p.n,
        epsilon: p.epsilon,
        temperature: p.temperature,
        ..base.clone()
    }
}

/// Trains one student per grid point; `on_row` sees each row as it completes.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: &Model,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let grid = ablation_grid(cfg)?;
    let probe = cfg.ablation.variance_probe.unwrap_or(DEFAULT_VARIANCE_PROBE);
    let mut rows = Vec::with_capacity(grid.len());
    for p in grid {
        let ssd = point_config(&cfg.ssd, &p);
        let run = run_student(cfg, data, teacher, &ssd, p.init, Some(p.seed))?;
        let rep_variance = if p.n >= 2 {
            probe_variance(teacher, &data.train, p.p_teacher, p.n, probe, p.seed)?
        } else {
            f64::NAN
        };
        let mean_kept = if run.steps.is_empty() {
            f64::NAN
        } else {
            run.steps.iter().map(|s| s.mean_kept).sum::<f64>() / run.steps.len() as f64
        };
        let row = AblationRow {
            p_teacher: p.p_teacher,
            n: p.n,
            epsilon: p.epsilon,
            temperature: p.temperature,
            init: p.init,
            seed: p.seed,
            accuracy: run.test.accuracy,
            rep_variance,
            mean_kept,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// One row of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Parameters needed at inference time.
    pub parameters: usize,
    pub train_flops: u64,
}

impl MethodRow {
    pub fn new(method: &str, m: &Metrics, parameters: usize, flops: &FlopLedger) -> Self {
        Self {
            method: method.to_string(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            weighted_f1: m.weighted_f1,
            parameters,
            train_flops: flops.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MethodRow>,
    pub ledgers: Vec<(String, FlopLedger)>,
    /// Member indices accepted by the greedy soup.
    pub greedy_ingredients: Vec<usize>,
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub const BASELINE: &str = "baseline";
pub const ENSEMBLE_VOTE: &str = "ensemble-vote";
pub const ENSEMBLE_AVERAGE: &str = "ensemble-average";
pub const UNIFORM_SOUP: &str = "uniform-soup";
pub const GREEDY_SOUP: &str = "greedy-soup";
pub const SSD: &str = "ssd";

/// Baseline, ensembles, soups and the SSD student on the test split. Ensemble
/// member 0 is `teacher`; member `i` is trained from model seed `seed + i`
/// and shuffle seed `teacher seed + i`. Soup members are fine-tuned from
/// `teacher`.
pub fn run_compare(cfg: &ExperimentConfig, data: &PreparedData, teacher: &TeacherRun) -> Result<Comparison> {
    let m = cfg.compare.members;
    if data.val.is_empty() {
        return Err(Error::config("the greedy soup needs a validation split (data.val_fraction > 0)"));
    }
    let base = &teacher.outcome.best;
    let eval_bs = cfg.teacher.eval_batch_size;
    let f = forward_flops(base);
    let samples = data.train.len();
    let epochs = cfg.teacher.epochs;

    let extra = parallel::map_range(m - 1, |i| -> Result<Model> {
        let k = (i + 1) as u64;
        let model = build_model(cfg, data, cfg.model.seed.wrapping_add(k))?;
        let train_cfg = crate::train::TrainConfig {
            seed: cfg.teacher.seed.wrapping_add(k),
            ..cfg.teacher.clone()
        };
        Ok(train_teacher(model, &data.train, &data.val, &train_cfg)?.best)
    });
    let mut members = vec![base.clone()];
    for r in extra {
        members.push(r?);
    }

    let tuned = parallel::map_range(m, |i| -> Result<Model> {
        let out = fine_tune(init_student_from_teacher(base), &data.train, &data.val, &cfg.soup_train_config(i), None)?;
        Ok(out.best)
    });
    let tuned = tuned.into_iter().collect::<Result<Vec<_>>>()?;

    let ensemble_flops = FlopLedger::ensemble(f, samples, epochs, m);
    let soup_flops = FlopLedger::soup(f, samples, epochs, cfg.compare.soup_finetune_epochs, m);
    let mut rows = vec![MethodRow::new(BASELINE, &teacher.test, base.num_parameters(), &teacher.flops)];
    for (name, rule) in [
        (ENSEMBLE_VOTE, CombinationRule::MajorityVote),
        (ENSEMBLE_AVERAGE, CombinationRule::ProbabilityAverage),
    ] {
        let ens = Ensemble::new(members.clone(), rule)?;
        let metrics = evaluate_ensemble(&ens, &data.test, eval_bs)?;
        rows.push(MethodRow::new(name, &metrics, ens.num_parameters(), &ensemble_flops));
    }

    let refs: Vec<&Model> = tuned.iter().collect();
    let uniform = uniform_soup(&refs)?;
    rows.push(MethodRow::new(
        UNIFORM_SOUP,
        &evaluate(&uniform, &data.test, eval_bs)?,
        uniform.num_parameters(),
        &soup_flops,
    ));
    let greedy = greedy_soup(&tuned, |model| Ok(evaluate(model, &data.val, eval_bs)?.accuracy))?;
    rows.push(MethodRow::new(
        GREEDY_SOUP,
        &evaluate(&greedy.model, &data.test, eval_bs)?,
        greedy.model.num_parameters(),
        &soup_flops,
    ));

    let student = run_student(cfg, data, base, &cfg.ssd, cfg.student.init, None)?;
    rows.push(MethodRow::new(SSD, &student.test, student.outcome.best.num_parameters(), &student.flops));

    Ok(Comparison {
        rows,
        ledgers: vec![
            (BASELINE.to_string(), teacher.flops.clone()),
            ("ensemble".to_string(), ensemble_flops),
            ("soup".to_string(), soup_flops),
            (SSD.to_string(), student.flops),
        ],
        greedy_ingredients: greedy.ingredients,
    })
}

/// One feature row of an exported embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub pass_index: usize,
    pub label: usize,
    pub features: Vec<f32>,
}

/// `n` distillation-time passes at rate `p_teacher` for every sample of `ds`,
/// ordered by sample then pass.
pub fn export_embeddings(
    model: &Model,
    ds: &Dataset,
    n: usize,
    p_teacher: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<EmbeddingRow>> {
    crate::nn::check_rate(p_teacher)?;
    let teacher = frozen(model);
    let ssd = SsdConfig {
        n,
        p_teacher,
        ..SsdConfig::default()
    };
    let rng = RngStream::new(seed).child(EMBED_TAG);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(ds.len() * n);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch::<f32>(chunk)?;
        let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        let set = generate_stochastic_representations(&teacher, &x, &ids, &ssd, &rng)?;
        for (s, &sample_id) in chunk.iter().enumerate() {
            for pass_index in 0..n {
                rows.push(EmbeddingRow {
                    sample_id,
                    pass_index,
                    label: labels[s],
                    features: set.row(s, pass_index).to_vec(),
                });
            }
        }
    }
    Ok(rows)
}
