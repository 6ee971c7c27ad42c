use super::*;
use crate::nn::{Architecture, ForwardCtx};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn defaults_validate() {
    let cfg = SsdConfig::default();
    cfg.validate().unwrap();
    assert_eq!(
        (cfg.n, cfg.p_teacher, cfg.p_student, cfg.temperature, cfg.epsilon, cfg.lambda),
        (30, 0.2, 0.1, 5.0, 90.0, 0.2)
    );
    assert!(!cfg.renormalize_after_mask);
    assert!(cfg.detach_attention);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        SsdConfig { n: 0, ..Default::default() },
        SsdConfig { temperature: 0.0, ..Default::default() },
        SsdConfig { epsilon: 100.5, ..Default::default() },
        SsdConfig { lambda: -0.1, ..Default::default() },
        SsdConfig { p_teacher: 1.0, ..Default::default() },
        SsdConfig { p_student: -0.1, ..Default::default() },
        SsdConfig { selection: SelectionScheme::TopK(31), ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().unwrap_err().is_config(), "{cfg:?}");
    }
}

#[test]
fn selection_scheme_round_trips() {
    for s in [SelectionScheme::Dynamic, SelectionScheme::TopK(15), SelectionScheme::DistillAll] {
        assert_eq!(s.to_string().parse::<SelectionScheme>().unwrap(), s);
    }
    assert!("top-k".parse::<SelectionScheme>().is_err());
    assert!("softmax".parse::<SelectionScheme>().is_err());
}

#[test]
fn similarity_cases() {
    assert_eq!(
        similarity_scores(&[1.0, 0.0], &[0.0, 2.0, 0.0, -3.0]).unwrap(),
        vec![0.0, 0.0]
    );
    let basis = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(similarity_scores(&[0.0, 1.0, 0.0], &basis).unwrap(), vec![0.0, 1.0, 0.0]);
    assert!(matches!(
        similarity_scores(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
        Err(Error::Dimension(_))
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random(&mut rng, 6);
    let rows = random(&mut rng, 6 * 5);
    let got = similarity_scores(&f, &rows).unwrap();
    for i in 0..5 {
        let mut want = 0.0;
        for j in 0..6 {
            want += f[j] * rows[i * 6 + j];
        }
        assert!((got[i] - want).abs() < 1e-14);
    }
}

#[test]
fn attention_cases() {
    for c in [-50.0, 0.0, 3.7] {
        for h in [0.1, 1.0, 5.0] {
            let a = attention_weights(&[c, c, c], h).unwrap();
            assert!(close(&a, &[1.0 / 3.0; 3], 1e-15));
        }
    }
    let h = 5.0;
    let a = attention_weights(&[h * 2f64.ln(), 0.0], h).unwrap();
    assert!(close(&a, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    assert!(attention_weights(&[1.0], 0.0).unwrap_err().is_config());
    assert!(attention_weights(&[1.0], -1.0).unwrap_err().is_config());

    let phi = [0.3, 1.9, -0.4, 0.8];
    let max_at = |h| {
        attention_weights(&phi, h)
            .unwrap()
            .into_iter()
            .fold(0.0, f64::max)
    };
    assert!(max_at(1.0) > max_at(5.0) && max_at(5.0) > max_at(15.0));
}

#[test]
fn percentile_ranks() {
    assert_eq!(percentile_rank(0.0, 30), 0);
    assert_eq!(percentile_rank(90.0, 30), 27);
    assert_eq!(percentile_rank(100.0, 30), 30);
    assert_eq!(percentile_rank(50.0, 4), 2);
    assert_eq!(percentile_rank(70.0, 10), 7);
    assert_eq!(percentile_rank(1.0, 30), 1);
}

#[test]
fn percentile_cases() {
    let alpha = [0.1, 0.2, 0.3, 0.4];
    let w = percentile_mask(&alpha, 50.0, false).unwrap();
    assert_eq!(w.masked, vec![0.0, 0.2, 0.3, 0.4]);
    assert_eq!(w.kept, vec![false, true, true, true]);

    assert_eq!(percentile_mask(&alpha, 0.0, false).unwrap().masked, alpha.to_vec());
    let top = percentile_mask(&[0.3, 0.1, 0.3, 0.3], 100.0, false).unwrap();
    assert_eq!(top.kept, vec![true, false, true, true]);

    let r = percentile_mask(&alpha, 50.0, true).unwrap();
    assert!(close(&r.masked, &[0.0, 2.0 / 9.0, 3.0 / 9.0, 4.0 / 9.0], 1e-15));

    assert!(percentile_mask(&alpha, -1.0, false).unwrap_err().is_config());
    assert!(percentile_mask(&alpha, 101.0, false).unwrap_err().is_config());
}

/// Brute-force nearest rank: the smallest value with at least ⌈εn/100⌉
/// values at or below it.
fn brute_threshold(alpha: &[f64], eps: f64) -> Option<f64> {
    let n = alpha.len();
    let need = (0..=n).find(|&r| r as f64 * 100.0 >= eps * n as f64 - 1e-9).unwrap();
    if need == 0 {
        return None;
    }
    alpha
        .iter()
        .copied()
        .filter(|&v| alpha.iter().filter(|&&u| u <= v).count() >= need)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
}

#[test]
fn percentile_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..40 {
        let n = 1 + trial % 31;
        let alpha = attention_weights(&random(&mut rng, n), 0.5).unwrap();
        for eps in (0..=100).step_by(10) {
            let eps = eps as f64;
            let t = brute_threshold(&alpha, eps);
            assert_eq!(percentile_threshold(&alpha, eps), t, "n={n} eps={eps}");
            let w = percentile_mask(&alpha, eps, false).unwrap();
            let kept: Vec<bool> = alpha.iter().map(|&a| t.map_or(true, |t| a >= t)).collect();
            assert_eq!(w.kept, kept);
        }
    }
}

#[test]
fn distinct_weights_keep_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alpha = attention_weights(&random(&mut rng, 30), 0.2).unwrap();
    let w = percentile_mask(&alpha, 90.0, false).unwrap();
    assert_eq!(w.kept_count(), 30 - 27 + 1);
}

#[test]
fn attend_cases() {
    let rows = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    assert_eq!(attend(&[0.0, 1.0, 0.0], &rows).unwrap(), vec![3.0, 4.0]);
    let same = [2.0, -1.0, 2.0, -1.0];
    assert!(close(&attend(&[0.3, 0.4], &same).unwrap(), &[1.4, -0.7], 1e-15));
    assert!(attend(&[0.5, 0.5], &[1.0, 2.0, 3.0]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random(&mut rng, 4);
    let rows = random(&mut rng, 4 * 3);
    let got = attend(&w, &rows).unwrap();
    for j in 0..3 {
        let want: f64 = (0..4).map(|i| w[i] * rows[i * 3 + j]).sum();
        assert!((got[j] - want).abs() < 1e-14);
    }
}

#[test]
fn total_loss_cases() {
    assert_eq!(total_loss(0.7, 3.0, 0.0), 0.7);
    assert_eq!(total_loss(0.7, 0.0, 0.2), 0.7);
    assert!((total_loss(1.0, 0.5, 0.2) - 1.1).abs() < 1e-15);
}

fn set_from(rows: Vec<f64>, b: usize, n: usize, d: usize) -> StochasticTeacherSet<f64> {
    StochasticTeacherSet::from_block(Tensor::new(&[b, n, d], rows).unwrap(), (0..b as u64).collect(), 0).unwrap()
}

#[test]
fn variance_cases() {
    let same = set_from(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 1, 3, 2);
    assert_eq!(representation_variance(&same).unwrap(), 0.0);
    let opposite = set_from(vec![1.0, -3.0, -1.0, 3.0], 1, 2, 2);
    assert_eq!(representation_variance(&opposite).unwrap(), 5.0);
    let single = set_from(vec![1.0, 2.0], 1, 1, 2);
    assert!(matches!(representation_variance(&single), Err(Error::Contract(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, n, d) = (3, 5, 4);
    let data = random(&mut rng, b * n * d);
    let got = representation_variance(&set_from(data.clone(), b, n, d)).unwrap();
    let mut total = 0.0;
    for s in 0..b {
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| data[(s * n + i) * d + j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            total += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        }
    }
    assert!((got - total / (b * d) as f64).abs() < 1e-14);
}

fn tiny_arch(dropout: f64) -> Architecture {
    Architecture::Mlp {
        channels: 2,
        length: 4,
        hidden: vec![6, 5],
        classes: 3,
        dropout,
    }
}

fn frozen(arch: &Architecture, seed: u64) -> Model<f64> {
    let mut m = arch.build(seed).unwrap();
    m.freeze();
    m
}

fn batch(seed: u64, b: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[b, 2, 4], random(&mut rng, b * 8)).unwrap()
}

#[test]
fn unfrozen_teacher_is_contract_error() {
    let teacher: Model<f64> = tiny_arch(0.2).build(1).unwrap();
    let err = generate_stochastic_representations(
        &teacher,
        &batch(1, 2),
        &[0, 1],
        &SsdConfig::default(),
        &RngStream::new(0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn zero_rate_rows_equal_eval_features() {
    let teacher = frozen(&tiny_arch(0.2), 2);
    let x = batch(3, 4);
    let cfg = SsdConfig { n: 5, p_teacher: 0.0, ..Default::default() };
    let set = generate_stochastic_representations(&teacher, &x, &[0, 1, 2, 3], &cfg, &RngStream::new(9)).unwrap();
    let (features, _) = teacher.forward(&x, &ForwardCtx::eval()).unwrap();
    for s in 0..4 {
        for i in 0..5 {
            assert_eq!(set.row(s, i), features.row(s));
        }
    }
}

#[test]
fn live_dropout_rows_differ_and_replay() {
    let teacher = frozen(&tiny_arch(0.2), 2);
    let x = batch(3, 2);
    let cfg = SsdConfig { n: 8, p_teacher: 0.5, ..Default::default() };
    let gen = || generate_stochastic_representations(&teacher, &x, &[10, 11], &cfg, &RngStream::new(4)).unwrap();
    let set = gen();
    assert!((1..8).any(|i| set.row(0, 0) != set.row(0, i)));
    assert!(representation_variance(&set).unwrap() > 0.0);
    assert_eq!(set, gen());
}

#[test]
fn single_pass_attends_to_itself() {
    let set = set_from(vec![0.5, -2.0, 1.0], 1, 1, 3);
    let f_s = Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
    let (target, w) = attended_targets(&set, &f_s, &SsdConfig::default()).unwrap();
    assert_eq!(w[0].alpha, vec![1.0]);
    assert_eq!(target.data(), &[0.5, -2.0, 1.0]);
}

#[test]
fn distill_all_differs_from_dynamic_when_rows_are_masked() {
    let teacher = frozen(&tiny_arch(0.3), 5);
    let x = batch(6, 3);
    let cfg = SsdConfig { n: 10, ..Default::default() };
    let set = generate_stochastic_representations(&teacher, &x, &[0, 1, 2], &cfg, &RngStream::new(1)).unwrap();
    let (f_s, _) = teacher.forward(&x, &ForwardCtx::eval()).unwrap();
    let (dynamic, w) = attended_targets(&set, &f_s, &cfg).unwrap();
    let all_cfg = SsdConfig { selection: SelectionScheme::DistillAll, ..cfg };
    let (all, _) = attended_targets(&set, &f_s, &all_cfg).unwrap();
    for s in 0..3 {
        assert!(w[s].kept_count() < 10);
        let mean = crate::baselines::distill_all_target(set.sample(s), 10).unwrap();
        assert_eq!(all.row(s), mean.as_slice());
    }
    assert!(dynamic.max_abs_diff(&all) > 1e-6);
}

#[test]
fn schemes_agree_in_direction_without_teacher_noise() {
    let teacher = frozen(&tiny_arch(0.3), 5);
    let x = batch(6, 3);
    let base = SsdConfig { n: 6, p_teacher: 0.0, renormalize_after_mask: true, ..Default::default() };
    let set = generate_stochastic_representations(&teacher, &x, &[0, 1, 2], &base, &RngStream::new(1)).unwrap();
    let (f_s, _) = teacher.forward(&x, &ForwardCtx::eval()).unwrap();
    let targets: Vec<Tensor<f64>> = [SelectionScheme::Dynamic, SelectionScheme::TopK(2), SelectionScheme::DistillAll]
        .into_iter()
        .map(|selection| attended_targets(&set, &f_s, &SsdConfig { selection, ..base.clone() }).unwrap().0)
        .collect();
    assert!(targets[0].max_abs_diff(&targets[1]) < 1e-12);
    assert!(targets[0].max_abs_diff(&targets[2]) < 1e-12);
}

#[test]
fn identical_teacher_without_noise_has_zero_distillation_loss() {
    let arch = tiny_arch(0.2);
    let teacher = frozen(&arch, 7);
    let student: Model<f64> = arch.build(7).unwrap();
    let x = batch(8, 5);
    let labels = [0, 1, 2, 0, 1];
    let ids = [0, 1, 2, 3, 4];
    let cfg = SsdConfig {
        n: 4,
        p_teacher: 0.0,
        p_student: 0.0,
        epsilon: 0.0,
        renormalize_after_mask: true,
        ..Default::default()
    };
    let out = sgkd_step(&student, &teacher, &x, &labels, &ids, &cfg, &RngStream::new(3)).unwrap();
    assert!(out.loss_dist < 1e-24, "{}", out.loss_dist);

    let task_only = SsdConfig { lambda: 0.0, ..cfg.clone() };
    let plain = sgkd_step(&student, &teacher, &x, &labels, &ids, &task_only, &RngStream::new(3)).unwrap();
    for (name, g) in &out.gradients {
        assert!(g.max_abs_diff(&plain.gradients[name]) < 1e-12, "{name}");
    }
}

#[test]
fn distill_all_matches_dynamic_without_noise() {
    let arch = tiny_arch(0.2);
    let teacher = frozen(&arch, 7);
    let student: Model<f64> = arch.build(9).unwrap();
    let x = batch(8, 4);
    let cfg = SsdConfig { n: 3, p_teacher: 0.0, epsilon: 0.0, ..Default::default() };
    let run = |selection| {
        sgkd_step(&student, &teacher, &x, &[0, 1, 2, 0], &[0, 1, 2, 3], &SsdConfig { selection, ..cfg.clone() }, &RngStream::new(2))
            .unwrap()
            .loss_total
    };
    assert!((run(SelectionScheme::Dynamic) - run(SelectionScheme::DistillAll)).abs() < 1e-12);
}

#[test]
fn step_is_reproducible_and_touches_only_the_student() {
    let arch = tiny_arch(0.2);
    let teacher = frozen(&arch, 1);
    let student: Model<f64> = arch.build(2).unwrap();
    let x = batch(3, 6);
    let labels = [0, 1, 2, 2, 1, 0];
    let ids = [5, 6, 7, 8, 9, 10];
    let cfg = SsdConfig { n: 7, ..Default::default() };
    let a = sgkd_step(&student, &teacher, &x, &labels, &ids, &cfg, &RngStream::new(11)).unwrap();
    let b = sgkd_step(&student, &teacher, &x, &labels, &ids, &cfg, &RngStream::new(11)).unwrap();
    assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
    for (name, g) in &a.gradients {
        assert_eq!(g, &b.gradients[name]);
    }
    let names: Vec<&String> = a.gradients.keys().collect();
    let student_names: Vec<&String> = student.params().iter().map(|p| &p.name).collect();
    assert_eq!(names, student_names);
    assert_eq!(a.diagnostics.kept_counts.len(), 6);
    assert!(a.diagnostics.rep_variance > 0.0);
    assert_eq!(a.diagnostics.alpha_histogram.iter().sum::<usize>(), 6 * 7);
    assert!((a.loss_total - total_loss(a.loss_task, a.loss_dist, 0.2)).abs() < 1e-12);
}

#[test]
fn step_rejects_trainable_teacher() {
    let arch = tiny_arch(0.2);
    let teacher: Model<f64> = arch.build(1).unwrap();
    let err = sgkd_step(&teacher, &teacher, &batch(1, 2), &[0, 1], &[0, 1], &SsdConfig::default(), &RngStream::new(0));
    assert!(matches!(err, Err(Error::Contract(_))));
}

/// Central differences over a few student weights with the target held fixed
/// reproduce the detached gradient; with attention attached they do not.
#[test]
fn detached_attention_gradient_matches_fixed_target_differences() {
    use crate::gradcheck::check_coordinates;
    use crate::tape::Tape;

    let arch = tiny_arch(0.2);
    let teacher = frozen(&arch, 1);
    let student: Model<f64> = arch.build(2).unwrap();
    let x = batch(3, 3);
    let labels = [0, 1, 2];
    let ids = [0, 1, 2];
    let cfg = SsdConfig { n: 6, p_teacher: 0.4, p_student: 0.0, epsilon: 50.0, lambda: 1.0, ..Default::default() };
    let rng = RngStream::new(17);
    let out = sgkd_step(&student, &teacher, &x, &labels, &ids, &cfg, &rng).unwrap();

    let set = generate_stochastic_representations(&teacher, &x, &ids, &cfg, &rng.child(TEACHER_TAG)).unwrap();
    let (f_s, _) = student.forward(&x, &ForwardCtx::eval()).unwrap();
    let (target, _) = attended_targets(&set, &f_s, &cfg).unwrap();

    let name = "fc2.weight";
    let pi = student.params().iter().position(|p| p.name == name).unwrap();
    let analytic = out.gradients[name].to_f64_vec();
    let loss_at = |i: usize, delta: f64| -> Result<f64> {
        let mut m = student.clone();
        m.params_mut()[pi].value.data_mut()[i] += delta;
        let mut tape = Tape::new();
        let params: Vec<_> = m.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let xv = tape.constant(x.clone());
        let o = m.forward_tape(&mut tape, &params, xv, &ForwardCtx::eval())?;
        let t = tape.constant(target.clone());
        let dist = tape.mse(o.features, t)?;
        let task = tape.softmax_cross_entropy(o.logits, &labels)?;
        let total = tape.add(task, dist)?;
        Ok(tape.value(total).item())
    };
    let coords: Vec<usize> = (0..analytic.len()).step_by(3).collect();
    let report = check_coordinates(&analytic, &coords, 1e-5, 1e-6, loss_at).unwrap();
    assert!(report.passed, "{report:?}");

    let attached = SsdConfig { detach_attention: false, ..cfg };
    let live = sgkd_step(&student, &teacher, &x, &labels, &ids, &attached, &rng).unwrap();
    assert!((live.loss_total - out.loss_total).abs() < 1e-12);
    assert!(live.gradients[name].max_abs_diff(&out.gradients[name]) > 1e-9);
}
