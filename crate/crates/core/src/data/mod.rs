//! Datasets: UCI HAR inertial signals, UCR TSV files and a seeded synthetic
//! generator, plus per-channel standardization and stratified splitting.

mod har;
mod synth;
mod ucr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use har::{load_uci_har, HarSplits, HAR_CHANNEL_NAMES, HAR_TEST_SAMPLES, HAR_TRAIN_SAMPLES};
pub use synth::{synth_generate, SynthSpec};
pub use ucr::{load_ucr_pair, load_ucr_tsv};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Labelled multichannel time series stored as `m × C × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f32>,
    channels: usize,
    length: usize,
    labels: Vec<usize>,
    classes: usize,
    channel_names: Vec<String>,
    stats: Option<ChannelStats>,
}

/// Per-channel mean and (floored, population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(
        values: Vec<f32>,
        channels: usize,
        length: usize,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::dim("datasets need at least one channel and one time step"));
        }
        if values.len() != labels.len() * channels * length {
            return Err(Error::dim(format!(
                "{} values do not form {} samples of {channels}×{length}",
                values.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            values,
            channels,
            length,
            labels,
            classes,
            channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
            stats: None,
        })
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels {
            return Err(Error::dim(format!(
                "{} channel names for {} channels",
                names.len(),
                self.channels
            )));
        }
        self.channel_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Statistics this dataset was standardized with, if any.
    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    /// The `C×L` values of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.channels * self.length;
        &self.values[i * w..(i + 1) * w]
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.channels * self.length);
        indices.iter().for_each(|&i| values.extend_from_slice(self.sample(i)));
        Dataset {
            values,
            channels: self.channels,
            length: self.length,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            channel_names: self.channel_names.clone(),
            stats: self.stats.clone(),
        }
    }

    /// Gathers `indices` into a `[B×C×L]` tensor with their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut values = Vec::with_capacity(indices.len() * self.channels * self.length);
        for &i in indices {
            values.extend(self.sample(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let x = Tensor::new(&[indices.len(), self.channels, self.length], values)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Mutable access for callers that perturb inputs (tests of leakage, augmentation).
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

impl ChannelStats {
    /// Per-channel statistics over every sample and time step.
    pub fn compute(ds: &Dataset) -> Self {
        let (c, l) = (ds.channels, ds.length);
        let count = (ds.len() * l).max(1) as f64;
        let mut mean = vec![0.0; c];
        for s in 0..ds.len() {
            for (ch, row) in ds.sample(s).chunks(l).enumerate() {
                mean[ch] += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for s in 0..ds.len() {
            for (ch, row) in ds.sample(s).chunks(l).enumerate() {
                var[ch] += row.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }
}

/// Applies `(x − μ)/σ̂` per channel using `stats` (normally from the train split).
pub fn standardize(ds: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    if stats.mean.len() != ds.channels || stats.std.len() != ds.channels {
        return Err(Error::dim(format!(
            "statistics for {} channels applied to {} channels",
            stats.mean.len(),
            ds.channels
        )));
    }
    let mut out = ds.clone();
    let l = ds.length;
    for sample in out.values.chunks_mut(ds.channels * l) {
        for (ch, row) in sample.chunks_mut(l).enumerate() {
            let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_FLOOR));
            row.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
    }
    out.stats = Some(stats.clone());
    Ok(out)
}

/// Splits off `fraction` of every class (rounded) as a second dataset,
/// shuffling within classes by `seed`.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "split fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut rng = RngStream::new(seed).child(0x5917).sequential();
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let take = (idx.len() as f64 * fraction).round() as usize;
        held.extend_from_slice(&idx[..take]);
        keep.extend_from_slice(&idx[take..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((ds.subset(&keep), ds.subset(&held)))
}

/// Shuffled mini-batches of `0..len`; the last batch may be short.
pub fn shuffled_batches(len: usize, batch_size: usize, rng: &RngStream) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be ≥ 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng.sequential());
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
