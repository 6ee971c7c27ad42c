use serde::{Deserialize, Serialize};

use crate::baselines::{ensemble_predict, Ensemble};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, ForwardCtx, Model};
use crate::parallel;
use crate::tensor::Scalar;

/// Classification metrics; `confusion[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Metrics from predicted and true labels. Macro-F1 averages over classes that
/// occur in either the labels or the predictions; a class with no true
/// positives scores 0.
pub fn classification_metrics(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if predicted.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Data(format!("class index outside [0, {classes})")));
        }
        confusion[y][p] += 1;
    }
    let total = labels.len();
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let (mut macro_sum, mut macro_n, mut weighted) = (0.0, 0usize, 0.0);
    for k in 0..classes {
        let support: usize = confusion[k].iter().sum();
        let predicted_k: usize = (0..classes).map(|y| confusion[y][k]).sum();
        if support == 0 && predicted_k == 0 {
            continue;
        }
        let tp = confusion[k][k] as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (support + predicted_k) as f64 };
        macro_sum += f1;
        macro_n += 1;
        weighted += f1 * support as f64;
    }
    let denom = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(Metrics {
        accuracy: denom(correct as f64, total),
        macro_f1: denom(macro_sum, macro_n),
        weighted_f1: denom(weighted, total),
        confusion,
    })
}

/// Eval-mode predictions and mean cross-entropy over a dataset.
pub fn predict<T: Scalar>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<(Vec<usize>, f64)> {
    if ds.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let batch_size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let outs = parallel::map_range(chunks.len(), |i| -> Result<(Vec<usize>, f64)> {
        let (x, y) = ds.batch::<T>(&chunks[i])?;
        let (_, logits) = model.forward(&x, &ForwardCtx::eval())?;
        let loss = softmax_cross_entropy(&logits, &y)?.as_f64() * y.len() as f64;
        Ok((argmax_rows(&logits), loss))
    });
    let mut preds = Vec::with_capacity(ds.len());
    let mut loss = 0.0;
    for o in outs {
        let (p, l) = o?;
        preds.extend(p);
        loss += l;
    }
    Ok((preds, loss / ds.len() as f64))
}

pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    let (preds, _) = predict(model, ds, batch_size)?;
    classification_metrics(&preds, ds.labels(), ds.classes())
}

pub fn evaluate_ensemble<T: Scalar>(ensemble: &Ensemble<T>, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch::<T>(chunk)?;
        preds.extend(ensemble_predict(ensemble, &x)?);
    }
    classification_metrics(&preds, ds.labels(), ds.classes())
}
