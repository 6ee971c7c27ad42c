use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ssd_core::data::Dataset;
use ssd_core::experiment::{
    build_model, export_embeddings, prepare_data, run_ablation, run_compare, run_student, run_teacher,
    AblationRow, ExperimentConfig, MethodRow, PreparedData, TeacherRun, BASELINE, DATA_DIR_ENV, SSD,
};
use ssd_core::nn::Model;
use ssd_core::train::{evaluate, frozen, Checkpoint, FlopLedger, Metrics, TrainOutcome};

use crate::args::{Command, Common, Split};
use crate::error::CliError;
use crate::output::{planned, RunDir};

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    methods: Vec<MethodRow>,
    flops: Vec<(String, FlopLedger)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    student_minus_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sweep: Vec<AblationRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    greedy_ingredients: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    confusion: Vec<Vec<usize>>,
}

impl<'a> Report<'a> {
    fn new(command: &'a str, methods: Vec<MethodRow>, flops: Vec<(String, FlopLedger)>) -> Self {
        Self {
            command,
            methods,
            flops,
            best_epoch: None,
            student_minus_baseline: None,
            sweep: Vec::new(),
            greedy_ingredients: Vec::new(),
            confusion: Vec::new(),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let path = &common.config;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    common.apply(&mut cfg);
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData, CliError> {
    let env_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    Ok(prepare_data(&cfg.data, env_dir.as_deref())?)
}

fn load_model(cfg: &ExperimentConfig, data: &PreparedData, path: &Path) -> Result<Model, CliError> {
    let ck = Checkpoint::load(path)?;
    let mut model = build_model(cfg, data, cfg.model.seed)?;
    ck.apply_to(&mut model)?;
    Ok(model)
}

fn loaded_teacher(cfg: &ExperimentConfig, data: &PreparedData, path: &Path) -> Result<TeacherRun, CliError> {
    let model = load_model(cfg, data, path)?;
    let test = evaluate(&model, &data.test, cfg.teacher.eval_batch_size)?;
    let f = ssd_core::train::forward_flops(&model);
    Ok(TeacherRun {
        outcome: TrainOutcome {
            best: model.clone(),
            best_epoch: 0,
            last: model,
            history: Vec::new(),
        },
        test,
        flops: FlopLedger::baseline(f, data.train.len(), cfg.teacher.epochs),
    })
}

fn path_input(name: &str, p: &Path) -> BTreeMap<String, String> {
    BTreeMap::from([(name.to_string(), p.display().to_string())])
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::TrainTeacher { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            train_teacher_cmd(&cfg, common.force)
        }
        Command::TrainStudent { common, ssd, teacher } => {
            let mut cfg = load_config(&common)?;
            ssd.apply(&mut cfg)?;
            cfg.validate()?;
            let teacher = teacher.unwrap_or_else(|| cfg.output.dir.join("teacher.ssdt"));
            train_student_cmd(&cfg, &teacher, common.force)
        }
        Command::Ablate { common, ssd, teacher } => {
            let mut cfg = load_config(&common)?;
            ssd.apply(&mut cfg)?;
            cfg.validate()?;
            ssd_core::experiment::ablation_grid(&cfg)?;
            ablate_cmd(&cfg, teacher.as_deref(), common.force)
        }
        Command::Compare {
            common,
            ssd,
            teacher,
            members,
        } => {
            let mut cfg = load_config(&common)?;
            ssd.apply(&mut cfg)?;
            if let Some(m) = members {
                cfg.compare.members = m;
            }
            cfg.validate()?;
            compare_cmd(&cfg, teacher.as_deref(), common.force)
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            split,
            n,
            p_teacher,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            if n == 0 {
                return Err(CliError::Config("--n must be ≥ 1".into()));
            }
            export_cmd(&cfg, &checkpoint, split, n, p_teacher, common.force)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            eval_cmd(&cfg, &checkpoint, split, common.force)
        }
    }
}

fn train_teacher_cmd(cfg: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let formats = &cfg.output.formats;
    let files = planned("", &["teacher.ssdt", "history.csv"], Some("report"), formats);
    let mut out = RunDir::open(&cfg.output.dir, force, &files)?;
    let data = prepare(cfg)?;
    let run = run_teacher(cfg, &data)?;
    run.outcome.checkpoint().save(&out.path("teacher.ssdt"))?;
    out.write_csv("history.csv", &run.outcome.history)?;
    let row = MethodRow::new(BASELINE, &run.test, run.outcome.best.num_parameters(), &run.flops);
    println!(
        "teacher: test accuracy {:.4} (best epoch {}), macro-F1 {:.4}",
        run.test.accuracy, run.outcome.best_epoch, run.test.macro_f1
    );
    let mut report = Report::new("train-teacher", vec![row.clone()], vec![(BASELINE.into(), run.flops.clone())]);
    report.best_epoch = Some(run.outcome.best_epoch);
    report.confusion = run.test.confusion.clone();
    out.write_report("report", formats, &[row], &report)?;
    out.finish("", "train-teacher", cfg, BTreeMap::new())
}

fn train_student_cmd(cfg: &ExperimentConfig, teacher_path: &Path, force: bool) -> Result<(), CliError> {
    let formats = &cfg.output.formats;
    let files = planned(
        "student_",
        &["student.ssdt", "student_history.csv", "diagnostics.csv"],
        Some("student_report"),
        formats,
    );
    let mut out = RunDir::open(&cfg.output.dir, force, &files)?;
    let data = prepare(cfg)?;
    let teacher = loaded_teacher(cfg, &data, teacher_path)?;
    let run = run_student(cfg, &data, &frozen(&teacher.outcome.best), &cfg.ssd, cfg.student.init, None)?;
    run.outcome.checkpoint().save(&out.path("student.ssdt"))?;
    out.write_csv("student_history.csv", &run.outcome.history)?;
    let header: Vec<String> = ["step", "L_task", "L_dist", "L_total", "mean_kept", "mean_alpha_max", "rep_variance"]
        .map(String::from)
        .to_vec();
    out.write_records(
        "diagnostics.csv",
        &header,
        run.steps.iter().map(|s| {
            vec![
                s.step.to_string(),
                fmt_f64(s.l_task),
                fmt_f64(s.l_dist),
                fmt_f64(s.l_total),
                fmt_f64(s.mean_kept),
                fmt_f64(s.mean_alpha_max),
                fmt_f64(s.rep_variance),
            ]
        }),
    )?;
    let params = run.outcome.best.num_parameters();
    let rows = vec![
        MethodRow::new(BASELINE, &teacher.test, params, &teacher.flops),
        MethodRow::new(SSD, &run.test, params, &run.flops),
    ];
    let delta = run.test.accuracy - teacher.test.accuracy;
    println!(
        "teacher {:.4} -> student {:.4} (delta {:+.4}), best epoch {}",
        teacher.test.accuracy, run.test.accuracy, delta, run.outcome.best_epoch
    );
    let mut report = Report::new(
        "train-student",
        rows.clone(),
        vec![(BASELINE.into(), teacher.flops.clone()), (SSD.into(), run.flops.clone())],
    );
    report.best_epoch = Some(run.outcome.best_epoch);
    report.student_minus_baseline = Some(delta);
    report.confusion = run.test.confusion.clone();
    out.write_report("student_report", formats, &rows, &report)?;
    out.finish("student_", "train-student", cfg, path_input("teacher", teacher_path))
}

/// Loads `teacher` or trains one, saving it under `save_as`.
fn teacher_for(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: Option<&Path>,
    out: &mut RunDir,
    save_as: &str,
) -> Result<(TeacherRun, BTreeMap<String, String>), CliError> {
    match teacher {
        Some(p) => Ok((loaded_teacher(cfg, data, p)?, path_input("teacher", p))),
        None => {
            let run = run_teacher(cfg, data)?;
            run.outcome.checkpoint().save(&out.path(save_as))?;
            eprintln!("trained teacher: test accuracy {:.4}", run.test.accuracy);
            Ok((run, BTreeMap::new()))
        }
    }
}

fn ablate_cmd(cfg: &ExperimentConfig, teacher: Option<&Path>, force: bool) -> Result<(), CliError> {
    let formats = &cfg.output.formats;
    let extra: &[&str] = if teacher.is_none() { &["ablation_teacher.ssdt"] } else { &[] };
    let files = planned("ablation_", extra, Some("ablation"), formats);
    let mut out = RunDir::open(&cfg.output.dir, force, &files)?;
    let data = prepare(cfg)?;
    let (t, inputs) = teacher_for(cfg, &data, teacher, &mut out, "ablation_teacher.ssdt")?;
    let rows = run_ablation(cfg, &data, &t.teacher(), |r| {
        println!(
            "p_T {:<4} n {:<3} eps {:<5} h {:<4} init {:?} seed {}: accuracy {:.4} variance {:.6} kept {:.2}",
            r.p_teacher, r.n, r.epsilon, r.temperature, r.init, r.seed, r.accuracy, r.rep_variance, r.mean_kept
        )
    })?;
    let baseline = MethodRow::new(BASELINE, &t.test, t.outcome.best.num_parameters(), &t.flops);
    let mut report = Report::new("ablate", vec![baseline], vec![(BASELINE.into(), t.flops.clone())]);
    report.sweep = rows.clone();
    out.write_report("ablation", formats, &rows, &report)?;
    out.finish("ablation_", "ablate", cfg, inputs)
}

fn compare_cmd(cfg: &ExperimentConfig, teacher: Option<&Path>, force: bool) -> Result<(), CliError> {
    let formats = &cfg.output.formats;
    let extra: &[&str] = if teacher.is_none() { &["compare_teacher.ssdt"] } else { &[] };
    let files = planned("compare_", extra, Some("compare"), formats);
    let mut out = RunDir::open(&cfg.output.dir, force, &files)?;
    let data = prepare(cfg)?;
    let (t, inputs) = teacher_for(cfg, &data, teacher, &mut out, "compare_teacher.ssdt")?;
    let cmp = run_compare(cfg, &data, &t)?;
    for r in &cmp.rows {
        println!(
            "{:<17} accuracy {:.4}  parameters {:>10}  train FLOPs {:.3e}",
            r.method, r.accuracy, r.parameters, r.train_flops as f64
        );
    }
    let mut report = Report::new("compare", cmp.rows.clone(), cmp.ledgers.clone());
    report.greedy_ingredients = cmp.greedy_ingredients.clone();
    out.write_report("compare", formats, &cmp.rows, &report)?;
    out.finish("compare_", "compare", cfg, inputs)
}

fn split_of(data: &PreparedData, split: Split) -> &Dataset {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

fn export_cmd(cfg: &ExperimentConfig, checkpoint: &Path, split: Split, n: usize, p: f64, force: bool) -> Result<(), CliError> {
    let files = planned("embeddings_", &["embeddings.csv"], None, &[]);
    let mut out = RunDir::open(&cfg.output.dir, force, &files)?;
    let data = prepare(cfg)?;
    let model = load_model(cfg, &data, checkpoint)?;
    let ds = split_of(&data, split);
    let rows = export_embeddings(&model, ds, n, p, cfg.teacher.seed, cfg.teacher.eval_batch_size)?;
    let d = model.feature_dim();
    let mut header: Vec<String> = ["sample_id", "pass_index", "label"].map(String::from).to_vec();
    header.extend((0..d).map(|j| format!("f{j}")));
    let count = rows.len();
    out.write_records(
        "embeddings.csv",
        &header,
        rows.into_iter().map(|r| {
            let mut rec = vec![r.sample_id.to_string(), r.pass_index.to_string(), r.label.to_string()];
            rec.extend(r.features.iter().map(|v| v.to_string()));
            rec
        }),
    )?;
    println!("wrote {count} rows ({} samples × {n} passes, d = {d})", ds.len());
    let mut inputs = path_input("checkpoint", checkpoint);
    inputs.insert("split".into(), format!("{split:?}").to_lowercase());
    inputs.insert("n".into(), n.to_string());
    inputs.insert("p_teacher".into(), p.to_string());
    out.finish("embeddings_", "export-embeddings", cfg, inputs)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: String,
    samples: usize,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path, split: Split, force: bool) -> Result<(), CliError> {
    let files = planned("eval_", &["eval.json"], None, &[]);
    let mut out = RunDir::open(&cfg.output.dir, force, &files)?;
    let data = prepare(cfg)?;
    let model = load_model(cfg, &data, checkpoint)?;
    let ds = split_of(&data, split);
    let metrics = evaluate(&model, ds, cfg.teacher.eval_batch_size)?;
    let name = format!("{split:?}").to_lowercase();
    println!(
        "{name}: accuracy {:.4}, macro-F1 {:.4}, weighted-F1 {:.4} over {} samples",
        metrics.accuracy,
        metrics.macro_f1,
        metrics.weighted_f1,
        ds.len()
    );
    out.write_json(
        "eval.json",
        &EvalReport {
            split: name.clone(),
            samples: ds.len(),
            metrics: &metrics,
        },
    )?;
    let mut inputs = path_input("checkpoint", checkpoint);
    inputs.insert("split".into(), name);
    out.finish("eval_", "eval", cfg, inputs)
}
