use indexmap::IndexMap;

use super::*;
use crate::data::{stratified_split, synth_generate, Dataset, SynthSpec};
use crate::error::Error;
use crate::nn::{build_har_cnn, Architecture, ForwardCtx, Model};
use crate::ssd::SsdConfig;
use crate::tensor::Tensor;

fn grads_of(model: &Model<f64>, value: f64) -> IndexMap<String, Tensor<f64>> {
    model
        .params()
        .iter()
        .map(|p| (p.name.clone(), Tensor::full(p.value.shape(), value)))
        .collect()
}

fn mlp(seed: u64) -> Model<f64> {
    Architecture::Mlp {
        channels: 1,
        length: 2,
        hidden: vec![3, 2],
        classes: 2,
        dropout: 0.0,
    }
    .build(seed)
    .unwrap()
}

#[test]
fn adam_first_steps_match_closed_form() {
    let mut m = mlp(1);
    let w0 = m.params()[0].value.data()[0];
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
    opt.step(&mut m, &grads_of(&mlp(1), 0.5)).unwrap();
    // Bias-corrected moments equal g and g², so the step is lr·g/(|g|+ε).
    let want = w0 - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((m.params()[0].value.data()[0] - want).abs() < 1e-15);

    opt.step(&mut m, &grads_of(&mlp(1), -1.0)).unwrap();
    let (b1, b2): (f64, f64) = (0.9, 0.999);
    let m2 = b1 * (1.0 - b1) * 0.5 + (1.0 - b1) * -1.0;
    let v2 = b2 * (1.0 - b2) * 0.25 + (1.0 - b2) * 1.0;
    let step = 0.1 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + 1e-8);
    assert!((m.params()[0].value.data()[0] - (want - step)).abs() < 1e-14);
}

#[test]
fn sgd_momentum_and_decay() {
    let mut m = mlp(1);
    let w0 = m.params()[0].value.data()[0];
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9)).unwrap();
    opt.step(&mut m, &grads_of(&mlp(1), 1.0)).unwrap();
    opt.step(&mut m, &grads_of(&mlp(1), 1.0)).unwrap();
    assert!((m.params()[0].value.data()[0] - (w0 - 0.1 - 0.1 * 1.9)).abs() < 1e-14);

    let mut m = mlp(1);
    let w0 = m.params()[0].value.data()[0];
    let cfg = OptimizerConfig {
        weight_decay: 0.5,
        ..OptimizerConfig::sgd(0.1, 0.0)
    };
    Optimizer::new(cfg).unwrap().step(&mut m, &grads_of(&mlp(1), 0.0)).unwrap();
    assert!((m.params()[0].value.data()[0] - w0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn frozen_parameters_do_not_move() {
    let mut m = mlp(1);
    m.freeze();
    let before = m.clone();
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
    opt.step(&mut m, &grads_of(&mlp(1), 1.0)).unwrap();
    assert_eq!(m.params(), before.params());
}

#[test]
fn optimizer_validation() {
    assert!(Optimizer::<f64>::new(OptimizerConfig::adam(0.0)).unwrap_err().is_config());
    assert!(Optimizer::<f64>::new(OptimizerConfig::sgd(0.1, 1.0)).unwrap_err().is_config());
}

#[test]
fn plateau_reduces_after_patience_and_never_increases() {
    let cfg = SchedulerConfig::ReduceOnPlateau {
        patience: 2,
        factor: 0.1,
        monitor: Monitor::TrainLoss,
    };
    let mut s = Scheduler::new(cfg, 1.0).unwrap();
    let losses = [1.0, 0.5, 0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0.4];
    let lrs: Vec<f64> = losses.iter().enumerate().map(|(e, &l)| s.epoch_end(e, l)).collect();
    assert_eq!(lrs[..4], [1.0, 1.0, 1.0, 1.0]);
    assert!((lrs[4] - 0.1).abs() < 1e-15);
    assert!((lrs[8] - 0.01).abs() < 1e-15);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn plateau_ignores_sub_threshold_gains() {
    let cfg = SchedulerConfig::ReduceOnPlateau {
        patience: 1,
        factor: 0.5,
        monitor: Monitor::TrainLoss,
    };
    let mut s = Scheduler::new(cfg, 1.0).unwrap();
    s.epoch_end(0, 1.0);
    s.epoch_end(1, 1.0 - 1e-6);
    assert_eq!(s.epoch_end(2, 1.0 - 2e-6), 0.5);
}

#[test]
fn plateau_on_accuracy_treats_higher_as_better() {
    let cfg = SchedulerConfig::ReduceOnPlateau {
        patience: 1,
        factor: 0.5,
        monitor: Monitor::ValAccuracy,
    };
    let mut s = Scheduler::new(cfg, 1.0).unwrap();
    for (e, acc) in [0.5, 0.6, 0.7, 0.8].into_iter().enumerate() {
        assert_eq!(s.epoch_end(e, acc), 1.0);
    }
}

#[test]
fn cosine_endpoints() {
    let mut s = Scheduler::new(SchedulerConfig::Cosine { t_max: 4 }, 2.0).unwrap();
    let lrs: Vec<f64> = (0..6).map(|e| s.epoch_end(e, 0.0)).collect();
    assert!((lrs[1] - 1.0).abs() < 1e-12);
    assert!(lrs[3].abs() < 1e-12 && lrs[5].abs() < 1e-12);
}

#[test]
fn scheduler_validation() {
    let bad = SchedulerConfig::ReduceOnPlateau {
        patience: 0,
        factor: 0.1,
        monitor: Monitor::TrainLoss,
    };
    assert!(bad.validate().unwrap_err().is_config());
    let bad = SchedulerConfig::ReduceOnPlateau {
        patience: 3,
        factor: 1.0,
        monitor: Monitor::TrainLoss,
    };
    assert!(bad.validate().unwrap_err().is_config());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let m: Model<f32> = build_har_cnn(0.2, 3).unwrap();
    let ck = Checkpoint::from_model(&m);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("teacher.ssdt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let mut other: Model<f32> = build_har_cnn(0.2, 4).unwrap();
    Checkpoint::load(&path).unwrap().apply_to(&mut other).unwrap();
    assert_eq!(other.params(), m.params());
}

#[test]
fn checkpoint_header_layout() {
    let mut t = IndexMap::new();
    t.insert("w".to_string(), Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap());
    let bytes = Checkpoint::new(t).to_bytes();
    let mut want = b"SSDT".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(b"w");
    want.extend(1u32.to_le_bytes());
    want.extend(2u64.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
}

#[test]
fn checkpoint_rejections_are_distinct() {
    let m = mlp(1);
    let bytes = Checkpoint::from_model(&m).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
    let mut har: Model<f64> = build_har_cnn(0.2, 0).unwrap();
    assert!(matches!(Checkpoint::from_model(&m).apply_to(&mut har), Err(Error::Checkpoint(_))));
}

#[test]
fn metrics_simple_cases() {
    let labels: Vec<usize> = (0..12).map(|i| i % 6).collect();
    let perfect = classification_metrics(&labels, &labels, 6).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert_eq!(perfect.macro_f1, 1.0);
    for (i, row) in perfect.confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            assert_eq!(c, if i == j { 2 } else { 0 });
        }
    }
    let constant = classification_metrics(&[0; 12], &labels, 6).unwrap();
    assert!((constant.accuracy - 1.0 / 6.0).abs() < 1e-15);
}

/// Independent per-class precision/recall computation over a toy split.
#[test]
fn metrics_match_brute_force() {
    let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 0, 1, 1, 2, 2, 0, 1, 2, 0, 1];
    let preds = [0, 2, 2, 0, 1, 1, 1, 1, 2, 0, 2, 1, 0, 2, 2, 0, 1, 2, 0, 0];
    let got = classification_metrics(&preds, &labels, 3).unwrap();
    let mut macro_f1 = 0.0;
    let mut weighted = 0.0;
    for k in 0..3 {
        let tp = (0..20).filter(|&i| preds[i] == k && labels[i] == k).count() as f64;
        let fp = (0..20).filter(|&i| preds[i] == k && labels[i] != k).count() as f64;
        let fn_ = (0..20).filter(|&i| preds[i] != k && labels[i] == k).count() as f64;
        let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
        let f1 = 2.0 * p * r / (p + r);
        macro_f1 += f1 / 3.0;
        weighted += f1 * (tp + fn_) / 20.0;
    }
    let acc = (0..20).filter(|&i| preds[i] == labels[i]).count() as f64 / 20.0;
    assert!((got.accuracy - acc).abs() < 1e-15);
    assert!((got.macro_f1 - macro_f1).abs() < 1e-12);
    assert!((got.weighted_f1 - weighted).abs() < 1e-12);
}

#[test]
fn dense_layer_flops() {
    let m: Model<f64> = Architecture::Mlp {
        channels: 1,
        length: 1664,
        hidden: vec![1000, 1],
        classes: 2,
        dropout: 0.0,
    }
    .build(0)
    .unwrap();
    assert_eq!(forward_flops(&m), 3_328_000 + 2 * 1000 + 2 * 2);
}

#[test]
fn har_forward_flops_by_layer() {
    let m: Model<f32> = build_har_cnn(0.2, 0).unwrap();
    let want = 2 * 32 * 9 * 9 * 120 + 2 * 64 * 32 * 9 * 52 + 2 * 1664 * 1000 + 2 * 1000 * 500 + 2 * 500 * 6;
    assert_eq!(forward_flops(&m), want as u64);
}

#[test]
fn ledger_ratios() {
    let f = 1000;
    let base = FlopLedger::baseline(f, 7352, 100).total() as f64;
    for n in [1, 3, 30] {
        let ssd = FlopLedger::ssd(f, 7352, 100, 100, n).total() as f64;
        assert!((ssd / base - (2.0 + n as f64 / 3.0)).abs() < 1e-12);
    }
    assert_eq!(FlopLedger::ensemble(f, 7352, 100, 25).total() as f64 / base, 25.0);
    assert_eq!(FlopLedger::soup(f, 7352, 0, 100, 25).total() as f64 / base, 25.0);
    assert_eq!(FlopLedger::soup(f, 10, 5, 5, 3), FlopLedger::soup(f, 10, 5, 5, 3));
}

fn synth(seed: u64) -> (Dataset, Dataset) {
    let spec = SynthSpec {
        classes: 4,
        channels: 2,
        length: 32,
        samples: 240,
        noise: 0.3,
    };
    stratified_split(&synth_generate(&spec, seed).unwrap(), 0.25, seed).unwrap()
}

fn small_arch(dropout: f64) -> Architecture {
    Architecture::Mlp {
        channels: 2,
        length: 32,
        hidden: vec![32, 16],
        classes: 4,
        dropout,
    }
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(0.003),
        scheduler: SchedulerConfig::None,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let (train, val) = synth(1);
    let m: Model<f64> = small_arch(0.2).build(3).unwrap();
    let out = train_teacher(m.clone(), &train, &val, &quick(0, 0)).unwrap();
    assert_eq!(out.best.params(), m.params());
    assert_eq!(out.best_epoch, 0);
    assert!(out.history.is_empty());
}

#[test]
fn loss_decreases_over_first_epochs() {
    let (train, val) = synth(2);
    let m: Model<f32> = small_arch(0.2).build(1).unwrap();
    let out = train_teacher(m, &train, &val, &quick(5, 7)).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn training_is_seed_deterministic() {
    let (train, val) = synth(3);
    let run = || {
        let m: Model<f32> = small_arch(0.3).build(1).unwrap();
        train_teacher(m, &train, &val, &quick(3, 5)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params(), b.best.params());
}

#[test]
fn nan_inputs_abort_with_divergence() {
    let (mut train, val) = synth(4);
    train.values_mut()[0] = f32::NAN;
    let m: Model<f32> = small_arch(0.2).build(1).unwrap();
    let err = train_teacher(m, &train, &val, &quick(2, 0)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn early_stopping_keeps_an_earlier_best() {
    let (train, val) = synth(5);
    let m: Model<f32> = small_arch(0.2).build(1).unwrap();
    let cfg = TrainConfig {
        early_stopping: Some(2),
        optimizer: OptimizerConfig::adam(0.05),
        ..quick(40, 1)
    };
    let out = train_teacher(m, &train, &val, &cfg).unwrap();
    let last = out.history.last().unwrap().epoch;
    assert!(out.best_epoch <= last);
    let best_acc = out.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.history[out.best_epoch - 1].val_accuracy, best_acc);
    let acc = evaluate(&out.best, &val, 64).unwrap().accuracy;
    assert!((acc - best_acc).abs() < 1e-12);
}

#[test]
fn student_starts_identical_to_teacher() {
    let teacher = frozen(&small_arch(0.2).build::<f64>(1).unwrap());
    let student = init_student_from_teacher(&teacher);
    assert!(teacher.is_frozen() && student.params().iter().all(|p| p.trainable));
    let x = synth(1).0.batch::<f64>(&[0, 1, 2]).unwrap().0;
    let ctx = ForwardCtx::eval();
    assert_eq!(teacher.forward(&x, &ctx).unwrap(), student.forward(&x, &ctx).unwrap());
    let random: Model<f64> = small_arch(0.2).build(2).unwrap();
    assert_ne!(teacher.forward(&x, &ctx).unwrap().1, random.forward(&x, &ctx).unwrap().1);

    let ck = Checkpoint::from_model(&teacher);
    let loaded = init_student_from_checkpoint(&random, &ck).unwrap();
    assert!(!loaded.is_frozen());
    let har: Model<f64> = build_har_cnn(0.2, 0).unwrap();
    assert!(matches!(init_student_from_checkpoint(&har, &ck), Err(Error::Checkpoint(_))));
}

#[test]
fn zero_lambda_student_matches_plain_fine_tuning() {
    let (train, val) = synth(6);
    let teacher_model: Model<f32> = small_arch(0.2).build(1).unwrap();
    let teacher = frozen(&train_teacher(teacher_model, &train, &val, &quick(2, 1)).unwrap().best);
    let ssd = SsdConfig {
        n: 4,
        lambda: 0.0,
        ..Default::default()
    };
    let cfg = quick(3, 9);
    let mut steps = 0;
    let student = train_student(init_student_from_teacher(&teacher), &teacher, &train, &val, &ssd, &cfg, |_| steps += 1).unwrap();
    let plain = fine_tune(init_student_from_teacher(&teacher), &train, &val, &cfg, Some(ssd.p_student)).unwrap();
    assert_eq!(steps, 3 * 6);
    for (s, p) in student.history.iter().zip(&plain.history) {
        assert_eq!(s.train_task_loss, p.train_loss);
        assert_eq!(s.val_loss, p.val_loss);
        assert_eq!(s.val_accuracy, p.val_accuracy);
    }
    assert_eq!(student.last.params(), plain.last.params());
}

#[test]
fn student_training_requires_frozen_teacher() {
    let (train, val) = synth(7);
    let t: Model<f32> = small_arch(0.2).build(1).unwrap();
    let err = train_student(t.clone(), &t, &train, &val, &SsdConfig::default(), &quick(1, 0), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn validation_monitor_needs_validation_split() {
    let (train, _) = synth(8);
    let empty = train.subset(&[]);
    let cfg = TrainConfig {
        early_stopping: Some(3),
        ..quick(1, 0)
    };
    let m: Model<f32> = small_arch(0.2).build(1).unwrap();
    assert!(train_teacher(m, &train, &empty, &cfg).unwrap_err().is_config());
}
