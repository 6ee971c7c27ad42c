//! Comparison methods: deep ensembles, model soups, weight averaging, and
//! the unfiltered and top-k distillation targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, check_compatible, softmax_probs, ForwardCtx, Model};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinationRule {
    /// Per-sample mode of member argmaxes; ties go to the lowest class index.
    MajorityVote,
    /// Argmax of the mean softmax probabilities.
    ProbabilityAverage,
}

#[derive(Debug, Clone)]
pub struct Ensemble<T: Scalar = f32> {
    members: Vec<Model<T>>,
    rule: CombinationRule,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(members: Vec<Model<T>>, rule: CombinationRule) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::config("an ensemble needs at least one member"))?;
        for m in &members[1..] {
            check_compatible(first, m)?;
        }
        Ok(Self { members, rule })
    }

    pub fn members(&self) -> &[Model<T>] {
        &self.members
    }

    pub fn rule(&self) -> CombinationRule {
        self.rule
    }

    /// Parameters needed at inference time: the sum over members.
    pub fn num_parameters(&self) -> usize {
        self.members.iter().map(Model::num_parameters).sum()
    }
}

/// Combined class predictions of the ensemble on `batch`.
pub fn ensemble_predict<T: Scalar>(ensemble: &Ensemble<T>, batch: &Tensor<T>) -> Result<Vec<usize>> {
    let outputs = parallel::map_range(ensemble.members.len(), |i| {
        ensemble.members[i]
            .forward(batch, &ForwardCtx::eval())
            .map(|(_, logits)| softmax_probs(&logits))
    });
    let probs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let (b, k) = (probs[0].rows(), probs[0].row_len());
    match ensemble.rule {
        CombinationRule::MajorityVote => {
            let votes: Vec<Vec<usize>> = probs.iter().map(argmax_rows).collect();
            Ok((0..b)
                .map(|s| {
                    let mut counts = vec![0usize; k];
                    votes.iter().for_each(|v| counts[v[s]] += 1);
                    first_max(&counts)
                })
                .collect())
        }
        CombinationRule::ProbabilityAverage => {
            let mut mean = vec![0.0f64; b * k];
            for p in &probs {
                mean.iter_mut().zip(p.data()).for_each(|(m, &v)| *m += v.as_f64());
            }
            Ok(mean.chunks(k).map(first_max).collect())
        }
    }
}

fn first_max<V: PartialOrd + Copy>(xs: &[V]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Parameter-wise arithmetic mean of the members.
pub fn uniform_soup<T: Scalar>(members: &[&Model<T>]) -> Result<Model<T>> {
    let first = *members
        .first()
        .ok_or_else(|| Error::config("a soup needs at least one member"))?;
    let mut soup = first.clone();
    for m in &members[1..] {
        check_compatible(first, m)?;
    }
    let inv = 1.0 / members.len() as f64;
    for (pi, param) in soup.params_mut().iter_mut().enumerate() {
        let mut acc = vec![0.0f64; param.value.len()];
        for m in members {
            acc.iter_mut()
                .zip(m.params()[pi].value.data())
                .for_each(|(a, &v)| *a += v.as_f64());
        }
        param
            .value
            .data_mut()
            .iter_mut()
            .zip(&acc)
            .for_each(|(v, &a)| *v = T::from_f64_lossy(a * inv));
    }
    Ok(soup)
}

#[derive(Debug, Clone)]
pub struct GreedySoup<T: Scalar = f32> {
    pub model: Model<T>,
    /// Member indices in the soup, in the order they were accepted.
    pub ingredients: Vec<usize>,
    pub val_accuracy: f64,
}

/// Visits members by descending validation accuracy (ties by lower index),
/// starting from the best, and keeps each one whose addition does not lower
/// the soup's validation accuracy.
pub fn greedy_soup<T: Scalar>(
    members: &[Model<T>],
    mut val_accuracy: impl FnMut(&Model<T>) -> Result<f64>,
) -> Result<GreedySoup<T>> {
    if members.is_empty() {
        return Err(Error::config("a soup needs at least one member"));
    }
    let scores = members.iter().map(&mut val_accuracy).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut ingredients = vec![order[0]];
    let mut best = scores[order[0]];
    let mut model = members[order[0]].clone();
    for &i in &order[1..] {
        let mut trial: Vec<&Model<T>> = ingredients.iter().map(|&j| &members[j]).collect();
        trial.push(&members[i]);
        let candidate = uniform_soup(&trial)?;
        let acc = val_accuracy(&candidate)?;
        if acc >= best {
            ingredients.push(i);
            best = acc;
            model = candidate;
        }
    }
    Ok(GreedySoup {
        model,
        ingredients,
        val_accuracy: best,
    })
}

/// Running mean of model weights over the tail epochs of a single run.
#[derive(Debug, Clone)]
pub struct SwaAverager<T: Scalar = f32> {
    sums: Vec<Vec<f64>>,
    template: Model<T>,
    count: usize,
}

impl<T: Scalar> SwaAverager<T> {
    pub fn new(template: &Model<T>) -> Self {
        Self {
            sums: template.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            template: template.clone(),
            count: 0,
        }
    }

    pub fn update(&mut self, model: &Model<T>) -> Result<()> {
        check_compatible(&self.template, model)?;
        for (sum, p) in self.sums.iter_mut().zip(model.params()) {
            sum.iter_mut().zip(p.value.data()).for_each(|(s, &v)| *s += v.as_f64());
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn average(&self) -> Result<Model<T>> {
        if self.count == 0 {
            return Err(Error::config("weight averaging saw no snapshots"));
        }
        let mut out = self.template.clone();
        let inv = 1.0 / self.count as f64;
        for (p, sum) in out.params_mut().iter_mut().zip(&self.sums) {
            p.value
                .data_mut()
                .iter_mut()
                .zip(sum)
                .for_each(|(v, &s)| *v = T::from_f64_lossy(s * inv));
        }
        Ok(out)
    }
}

/// Unweighted mean of the `n` rows of a row-major `n×d` block.
pub fn distill_all_target<T: Scalar>(rows: &[T], n: usize) -> Result<Vec<T>> {
    if n == 0 || rows.is_empty() || rows.len() % n != 0 {
        return Err(Error::dim(format!(
            "{} values are not {n} equal rows",
            rows.len()
        )));
    }
    let d = rows.len() / n;
    let mut acc = vec![0.0f64; d];
    for row in rows.chunks(d) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
    }
    Ok(acc.into_iter().map(|a| T::from_f64_lossy(a / n as f64)).collect())
}

/// Keeps the `k` largest weights (ties by lower index) and zeroes the rest.
pub fn top_k_select<T: Scalar>(alpha: &[T], k: usize) -> Result<Vec<T>> {
    let kept = top_k_kept(alpha, k)?;
    Ok(alpha
        .iter()
        .zip(kept)
        .map(|(&a, k)| if k { a } else { T::zero() })
        .collect())
}

pub(crate) fn top_k_kept<T: Scalar>(alpha: &[T], k: usize) -> Result<Vec<bool>> {
    if k < 1 || k > alpha.len() {
        return Err(Error::config(format!(
            "top-k needs 1 ≤ k ≤ {}, got {k}",
            alpha.len()
        )));
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| {
        alpha[b]
            .partial_cmp(&alpha[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = vec![false; alpha.len()];
    order[..k].iter().for_each(|&i| kept[i] = true);
    Ok(kept)
}
