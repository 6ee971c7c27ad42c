//! Student-guided distillation from stochastic teacher representations.
//!
//! A frozen teacher run with live dropout yields `n` feature vectors per
//! sample. The student's current feature vector scores each of them by dot
//! product, a temperature softmax turns the scores into attention weights,
//! weights below the per-sample ε-th percentile are zeroed, and the weighted
//! sum of the surviving rows becomes the feature-level MSE target.

mod step;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use step::{attended_targets, sgkd_step, SgkdOutput, StepDiagnostics, STUDENT_TAG, TEACHER_TAG};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// How the distillation target is formed from the stochastic rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionScheme {
    /// Percentile masking of the attention weights.
    Dynamic,
    /// Keep the `k` largest attention weights.
    TopK(usize),
    /// Unweighted mean of all rows.
    DistillAll,
}

impl fmt::Display for SelectionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionScheme::Dynamic => f.write_str("dynamic"),
            SelectionScheme::TopK(k) => write!(f, "top-k:{k}"),
            SelectionScheme::DistillAll => f.write_str("distill-all"),
        }
    }
}

impl FromStr for SelectionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(SelectionScheme::Dynamic),
            "distill-all" => Ok(SelectionScheme::DistillAll),
            _ => {
                let k = s
                    .strip_prefix("top-k:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| {
                        Error::config(format!(
                            "selection `{s}` is not one of dynamic, distill-all, top-k:<k>"
                        ))
                    })?;
                Ok(SelectionScheme::TopK(k))
            }
        }
    }
}

impl TryFrom<String> for SelectionScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SelectionScheme> for String {
    fn from(s: SelectionScheme) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsdConfig {
    /// Stochastic teacher passes per sample.
    pub n: usize,
    /// Teacher dropout rate at distillation time.
    pub p_teacher: f64,
    /// Student dropout rate during its own training.
    pub p_student: f64,
    /// Attention temperature.
    pub temperature: f64,
    /// Percentile threshold in `[0, 100]`.
    pub epsilon: f64,
    /// Weight of the feature distillation loss.
    pub lambda: f64,
    pub renormalize_after_mask: bool,
    /// Treat attention weights as constants in the backward pass.
    pub detach_attention: bool,
    pub selection: SelectionScheme,
    /// Weight of an optional KL term on logits (temperature 1); 0 disables it.
    pub logit_kl_weight: f64,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            n: 30,
            p_teacher: 0.2,
            p_student: 0.1,
            temperature: 5.0,
            epsilon: 90.0,
            lambda: 0.2,
            renormalize_after_mask: false,
            detach_attention: true,
            selection: SelectionScheme::Dynamic,
            logit_kl_weight: 0.0,
        }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::config("ssd.n must be ≥ 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "ssd.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=100.0).contains(&self.epsilon) {
            return Err(Error::config(format!(
                "ssd.epsilon must lie in [0, 100], got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0) || !(self.logit_kl_weight >= 0.0) {
            return Err(Error::config("ssd.lambda and ssd.logit_kl_weight must be ≥ 0"));
        }
        for (name, p) in [("p_teacher", self.p_teacher), ("p_student", self.p_student)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("ssd.{name} must lie in [0, 1), got {p}")));
            }
        }
        if let SelectionScheme::TopK(k) = self.selection {
            if k < 1 || k > self.n {
                return Err(Error::config(format!(
                    "top-k needs 1 ≤ k ≤ n = {}, got {k}",
                    self.n
                )));
            }
        }
        Ok(())
    }
}

/// The `n` stochastic feature rows of every sample in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticTeacherSet<T: Scalar = f32> {
    reps: Tensor<T>,
    sample_ids: Vec<u64>,
    base_seed: u64,
}

impl<T: Scalar> StochasticTeacherSet<T> {
    /// Wraps a `[B×n×d]` block.
    pub fn from_block(reps: Tensor<T>, sample_ids: Vec<u64>, base_seed: u64) -> Result<Self> {
        if reps.rank() != 3 || reps.shape()[0] != sample_ids.len() {
            return Err(Error::dim(format!(
                "representation block {:?} does not match {} samples",
                reps.shape(),
                sample_ids.len()
            )));
        }
        Ok(Self {
            reps,
            sample_ids,
            base_seed,
        })
    }

    pub fn samples(&self) -> usize {
        self.reps.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.reps.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.reps.shape()[2]
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// The `n×d` rows of sample `s`, row-major.
    pub fn sample(&self, s: usize) -> &[T] {
        self.reps.row(s)
    }

    pub fn row(&self, s: usize, i: usize) -> &[T] {
        let d = self.d();
        &self.sample(s)[i * d..(i + 1) * d]
    }

    pub fn block(&self) -> &Tensor<T> {
        &self.reps
    }
}

/// Attention weights of one sample before and after selection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T: Scalar = f32> {
    pub alpha: Vec<T>,
    pub masked: Vec<T>,
    pub kept: Vec<bool>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

/// Runs `cfg.n` distillation-time dropout passes of a frozen teacher.
pub fn generate_stochastic_representations<T: Scalar>(
    teacher: &Model<T>,
    batch: &Tensor<T>,
    sample_ids: &[u64],
    cfg: &SsdConfig,
    rng: &RngStream,
) -> Result<StochasticTeacherSet<T>> {
    if !teacher.is_frozen() {
        return Err(Error::Contract(
            "teacher has trainable parameters; freeze it before distillation".into(),
        ));
    }
    let block = teacher.stochastic_features(batch, sample_ids, cfg.n, rng, Some(cfg.p_teacher))?;
    StochasticTeacherSet::from_block(block, sample_ids.to_vec(), rng.base_seed())
}

fn rows_of<'a, T: Scalar>(f_s: &[T], rows: &'a [T]) -> Result<usize> {
    let d = f_s.len();
    if d == 0 || rows.is_empty() || rows.len() % d != 0 {
        return Err(Error::dim(format!(
            "{} teacher values are not a whole number of rows of width {d}",
            rows.len()
        )));
    }
    Ok(rows.len() / d)
}

/// `φ_i = ⟨f_S, f^T_i⟩` for each row of the row-major `n×d` block.
pub fn similarity_scores<T: Scalar>(f_s: &[T], rows: &[T]) -> Result<Vec<T>> {
    rows_of(f_s, rows)?;
    Ok(rows
        .chunks(f_s.len())
        .map(|r| r.iter().zip(f_s).map(|(&a, &b)| a * b).sum())
        .collect())
}

/// Temperature softmax `α_i = exp(φ_i/h) / Σ_j exp(φ_j/h)`, max-shifted.
pub fn attention_weights<T: Scalar>(phi: &[T], h: f64) -> Result<Vec<T>> {
    if !(h > 0.0) {
        return Err(Error::config(format!("attention temperature must be > 0, got {h}")));
    }
    let mut alpha = phi.to_vec();
    crate::tape::softmax_in_place(&mut alpha, T::from_f64_lossy(h));
    Ok(alpha)
}

/// 1-based nearest rank `⌈(ε/100)·n⌉`; 0 means nothing is masked.
pub fn percentile_rank(epsilon: f64, n: usize) -> usize {
    let r = (epsilon * n as f64 / 100.0 - 1e-9).ceil();
    (r.max(0.0) as usize).min(n)
}

/// Nearest-rank ε-th percentile of `alpha` (`None` when ε selects nothing).
pub fn percentile_threshold<T: Scalar>(alpha: &[T], epsilon: f64) -> Option<T> {
    let rank = percentile_rank(epsilon, alpha.len());
    if rank == 0 {
        return None;
    }
    let mut sorted = alpha.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite attention weights"));
    Some(sorted[rank - 1])
}

/// Zeroes every weight below the ε-th percentile; ties at the threshold survive.
pub fn percentile_mask<T: Scalar>(
    alpha: &[T],
    epsilon: f64,
    renormalize: bool,
) -> Result<AttentionWeights<T>> {
    if !(0.0..=100.0).contains(&epsilon) {
        return Err(Error::config(format!(
            "percentile must lie in [0, 100], got {epsilon}"
        )));
    }
    let kept: Vec<bool> = match percentile_threshold(alpha, epsilon) {
        None => vec![true; alpha.len()],
        Some(t) => alpha.iter().map(|&a| a >= t).collect(),
    };
    Ok(apply_keep(alpha, kept, renormalize))
}

pub(crate) fn apply_keep<T: Scalar>(alpha: &[T], kept: Vec<bool>, renormalize: bool) -> AttentionWeights<T> {
    let mut masked: Vec<T> = alpha
        .iter()
        .zip(&kept)
        .map(|(&a, &k)| if k { a } else { T::zero() })
        .collect();
    if renormalize {
        let s: T = masked.iter().copied().sum();
        if s > T::zero() {
            masked.iter_mut().for_each(|m| *m = *m / s);
        }
    }
    AttentionWeights {
        alpha: alpha.to_vec(),
        masked,
        kept,
    }
}

/// `Σ_i α̂_i · f^T_i` over the row-major `n×d` block.
pub fn attend<T: Scalar>(weights: &[T], rows: &[T]) -> Result<Vec<T>> {
    if weights.is_empty() || rows.len() % weights.len() != 0 {
        return Err(Error::dim(format!(
            "{} weights cannot index {} teacher values",
            weights.len(),
            rows.len()
        )));
    }
    let d = rows.len() / weights.len();
    let mut out = vec![T::zero(); d];
    for (&w, row) in weights.iter().zip(rows.chunks(d)) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + w * v);
    }
    Ok(out)
}

/// `L_task + λ·L_dist`.
pub fn total_loss(task: f64, dist: f64, lambda: f64) -> f64 {
    task + lambda * dist
}

/// Mean over samples and feature dimensions of the population variance across the `n` rows.
pub fn representation_variance<T: Scalar>(set: &StochasticTeacherSet<T>) -> Result<f64> {
    let (n, d) = (set.n(), set.d());
    if n < 2 {
        return Err(Error::Contract(format!(
            "representation variance needs n ≥ 2, got {n}"
        )));
    }
    let mut total = 0.0;
    for s in 0..set.samples() {
        let block = set.sample(s);
        for j in 0..d {
            let mean = (0..n).map(|i| block[i * d + j].as_f64()).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (block[i * d + j].as_f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            total += var;
        }
    }
    Ok(total / (set.samples() * d) as f64)
}

#[cfg(test)]
mod tests;
