use indexmap::IndexMap;

use crate::baselines::{distill_all_target, top_k_kept};
use crate::error::{Error, Result};
use crate::nn::{softmax_probs, DropoutMode, ForwardCtx, Model};
use crate::rng::{RngStream, STUDENT_PASS};
use crate::ssd::{
    apply_keep, attend, attention_weights, generate_stochastic_representations, percentile_mask,
    representation_variance, similarity_scores, AttentionWeights, SelectionScheme, SsdConfig,
    StochasticTeacherSet,
};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Child-stream tags separating teacher masks from student masks within a step.
pub const TEACHER_TAG: u64 = 0x7EAC;
pub const STUDENT_TAG: u64 = 0x57D7;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Surviving rows per sample.
    pub kept_counts: Vec<usize>,
    /// Largest unmasked attention weight per sample.
    pub alpha_max: Vec<f64>,
    /// Histogram of all unmasked attention weights over ten equal bins of `[0, 1]`.
    pub alpha_histogram: [usize; 10],
    /// Mean per-dimension variance across the teacher rows (0 when n = 1).
    pub rep_variance: f64,
}

impl StepDiagnostics {
    pub fn mean_kept(&self) -> f64 {
        mean(self.kept_counts.iter().map(|&k| k as f64))
    }

    pub fn mean_alpha_max(&self) -> f64 {
        mean(self.alpha_max.iter().copied())
    }

    fn record(&mut self, w: &AttentionWeights<impl Scalar>) {
        self.kept_counts.push(w.kept_count());
        let mut max = 0.0f64;
        for a in &w.alpha {
            let a = a.as_f64();
            max = max.max(a);
            self.alpha_histogram[((a * 10.0) as usize).min(9)] += 1;
        }
        self.alpha_max.push(max);
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

pub struct SgkdOutput<T: Scalar = f32> {
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_dist: f64,
    /// Gradients of the student parameters, by name.
    pub gradients: IndexMap<String, Tensor<T>>,
    pub diagnostics: StepDiagnostics,
}

/// Selection weights for one sample under the configured scheme.
fn select<T: Scalar>(f_s: &[T], rows: &[T], cfg: &SsdConfig) -> Result<AttentionWeights<T>> {
    let n = rows.len() / f_s.len();
    match cfg.selection {
        SelectionScheme::DistillAll => {
            let u = T::from_f64_lossy(1.0 / n as f64);
            Ok(apply_keep(&vec![u; n], vec![true; n], false))
        }
        SelectionScheme::Dynamic => {
            let alpha = attention_weights(&similarity_scores(f_s, rows)?, cfg.temperature)?;
            percentile_mask(&alpha, cfg.epsilon, cfg.renormalize_after_mask)
        }
        SelectionScheme::TopK(k) => {
            let alpha = attention_weights(&similarity_scores(f_s, rows)?, cfg.temperature)?;
            let kept = top_k_kept(&alpha, k)?;
            Ok(apply_keep(&alpha, kept, cfg.renormalize_after_mask))
        }
    }
}

/// Distillation targets `[B×d]` for student features `[B×d]`, with per-sample weights.
pub fn attended_targets<T: Scalar>(
    set: &StochasticTeacherSet<T>,
    student_features: &Tensor<T>,
    cfg: &SsdConfig,
) -> Result<(Tensor<T>, Vec<AttentionWeights<T>>)> {
    let (b, d) = (set.samples(), set.d());
    if student_features.shape() != [b, d] {
        return Err(Error::dim(format!(
            "student features {:?} do not match teacher set [{b}×{d}]",
            student_features.shape()
        )));
    }
    let mut targets = Vec::with_capacity(b * d);
    let mut weights = Vec::with_capacity(b);
    for s in 0..b {
        let rows = set.sample(s);
        let w = select(student_features.row(s), rows, cfg)?;
        let target = match cfg.selection {
            SelectionScheme::DistillAll => distill_all_target(rows, set.n())?,
            _ => attend(&w.masked, rows)?,
        };
        targets.extend(target);
        weights.push(w);
    }
    Ok((Tensor::new(&[b, d], targets)?, weights))
}

/// One student update's loss and gradients. The teacher must be frozen; only
/// student parameters receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn sgkd_step<T: Scalar>(
    student: &Model<T>,
    teacher: &Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    sample_ids: &[u64],
    cfg: &SsdConfig,
    rng: &RngStream,
) -> Result<SgkdOutput<T>> {
    cfg.validate()?;
    let set = generate_stochastic_representations(teacher, batch, sample_ids, cfg, &rng.child(TEACHER_TAG))?;

    let mut tape = Tape::new();
    let params = student.bind(&mut tape);
    let x = tape.constant(batch.clone());
    let ctx = ForwardCtx::stochastic(DropoutMode::Train, rng.child(STUDENT_TAG), sample_ids, STUDENT_PASS)
        .with_rate(cfg.p_student);
    let out = student.forward_tape(&mut tape, &params, x, &ctx)?;
    let f_s = tape.value(out.features).clone();

    let mut diagnostics = StepDiagnostics::default();
    let (target, weights) = attended_targets(&set, &f_s, cfg)?;
    weights.iter().for_each(|w| diagnostics.record(w));
    if set.n() >= 2 {
        diagnostics.rep_variance = representation_variance(&set)?;
    }

    let target = if cfg.detach_attention || cfg.selection == SelectionScheme::DistillAll {
        tape.constant(target)
    } else {
        // Same selection, but the weights stay differentiable functions of f_S.
        let (b, n) = (set.samples(), set.n());
        let phi = tape.row_dots(out.features, set.block().clone())?;
        let alpha = tape.softmax_rows(phi, T::from_f64_lossy(cfg.temperature))?;
        let mut keep = Vec::with_capacity(b * n);
        for w in &weights {
            keep.extend(w.kept.iter().map(|&k| if k { T::one() } else { T::zero() }));
        }
        let mut masked = tape.mul_const(alpha, Tensor::new(&[b, n], keep)?)?;
        if cfg.renormalize_after_mask {
            masked = tape.normalize_rows(masked)?;
        }
        tape.weighted_rows(masked, set.block().clone())?
    };

    let dist = tape.mse(out.features, target)?;
    let task = tape.softmax_cross_entropy(out.logits, labels)?;
    let weighted = tape.scale(dist, T::from_f64_lossy(cfg.lambda));
    let mut total = tape.add(task, weighted)?;
    if cfg.logit_kl_weight > 0.0 {
        let (_, teacher_logits) = teacher.forward(batch, &ForwardCtx::eval())?;
        let probs = softmax_probs(&teacher_logits);
        // Cross-entropy against the teacher differs from KL by the teacher's
        // entropy, a constant with no gradient.
        let ce = tape.soft_cross_entropy(out.logits, probs)?;
        let kl = tape.scale(ce, T::from_f64_lossy(cfg.logit_kl_weight));
        total = tape.add(total, kl)?;
    }

    let loss_total = tape.value(total).item().as_f64();
    let loss_task = tape.value(task).item().as_f64();
    let loss_dist = tape.value(dist).item().as_f64();
    if !loss_total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            message: format!("non-finite SGKD loss {loss_total}"),
        });
    }
    let gradients = tape.backward(total)?.into_named();
    Ok(SgkdOutput {
        loss_total,
        loss_task,
        loss_dist,
        gradients,
        diagnostics,
    })
}
