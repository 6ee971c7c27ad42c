use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::RngStream;

/// Cycles per window of class 0, and the spacing between adjacent classes.
const BASE_CYCLES: f64 = 2.0;
const CYCLE_SPACING: f64 = 2.0;
/// Half-width of the per-sample frequency jitter, in class spacings per unit of noise.
/// At σ = 0.5 adjacent classes overlap enough that four classes have a Bayes
/// accuracy of 0.875.
const JITTER_PER_SIGMA: f64 = 1.2;

/// Class `k` is a sinusoid at `2 + 2k` cycles per window with a random phase per
/// channel. `noise` sets both the additive Gaussian σ and a proportional
/// per-sample frequency jitter, so σ = 0 gives perfectly separable classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub samples: usize,
    pub noise: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.channels == 0 || self.length == 0 || self.samples == 0 {
            return Err(Error::config("synthetic channels, length and samples must be ≥ 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config(format!("noise must be ≥ 0, got {}", self.noise)));
        }
        let top = self.frequency(self.classes - 1) + self.jitter();
        if 2.0 * top >= self.length as f64 {
            return Err(Error::config(format!(
                "{} classes exceed the Nyquist limit of a length-{} window",
                self.classes, self.length
            )));
        }
        Ok(())
    }

    /// Centre frequency of class `k` in cycles per window.
    pub fn frequency(&self, k: usize) -> f64 {
        BASE_CYCLES + CYCLE_SPACING * k as f64
    }

    /// Half-width of the per-sample frequency jitter in cycles per window.
    pub fn jitter(&self) -> f64 {
        JITTER_PER_SIGMA * self.noise * CYCLE_SPACING
    }

    /// Accuracy of the ideal classifier that reads the exact jittered
    /// frequency and picks the nearest class centre (exact while the jitter is
    /// at most one class spacing).
    pub fn bayes_accuracy(&self) -> f64 {
        let w = self.jitter() / CYCLE_SPACING;
        if w <= 0.5 {
            return 1.0;
        }
        let side_error = (2.0 * w - 1.0) / (4.0 * w);
        let sides = 2.0 * (self.classes as f64 - 1.0);
        1.0 - sides * side_error / self.classes as f64
    }
}

/// Deterministic in `seed`; labels cycle through the classes in order.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let stream = RngStream::new(seed).child(0x5E7);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;
    let (c, l) = (spec.channels, spec.length);
    let samples = parallel::map_range(spec.samples, |i| {
        let mut rng = stream.rng(i as u64, 0);
        let class = i % spec.classes;
        let jitter = spec.jitter();
        let cycles = spec.frequency(class) + if jitter > 0.0 { rng.gen_range(-jitter..jitter) } else { 0.0 };
        let mut out = Vec::with_capacity(c * l);
        for _ in 0..c {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for t in 0..l {
                let clean = (std::f64::consts::TAU * cycles * t as f64 / l as f64 + phase).sin();
                let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                out.push((clean + noise) as f32);
            }
        }
        out
    });
    let labels = (0..spec.samples).map(|i| i % spec.classes).collect();
    Dataset::new(samples.concat(), c, l, labels, spec.classes)
}
