//! Layers, model builders and losses.

mod arch;
mod model;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use arch::{build_har_cnn, Architecture, HAR_CHANNELS, HAR_CLASSES, HAR_LENGTH};
pub use model::{ForwardCtx, ForwardVars, Layer, Model, Param};
pub(crate) use arch::check_rate;
pub(crate) use model::check_compatible;

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// How dropout sites behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Fresh masks with inverted scaling.
    Train,
    /// Dropout is the identity.
    Eval,
    /// Frozen network in evaluation behaviour except that dropout sites keep sampling masks.
    Distill,
}

/// Inverted-dropout mask: each entry is `1/(1−p)` with probability `1−p`, else 0.
pub(crate) fn dropout_mask<T: Scalar>(width: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    (0..width)
        .map(|_| if rng.gen::<f64>() >= p { keep } else { T::zero() })
        .collect()
}

/// Applies dropout to a whole tensor. `Eval` (or `p = 0`) returns `x` unchanged.
pub fn dropout_apply<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    arch::check_rate(p)?;
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.len(), p, rng);
    Tensor::new(
        x.shape(),
        x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
    )
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// Mean squared difference over all components.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let loss = tape.mse(a, b)?;
    Ok(tape.value(loss).item())
}

/// Row-wise softmax of logits.
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        crate::tape::softmax_in_place(row, T::one());
    }
    out
}

/// Argmax per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.row_len();
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::RngStream;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(b: usize, c: usize, l: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[b, c, l],
            (0..b * c * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn har_cnn_parameter_count() {
        let m = build_har_cnn::<f32>(0.2, 0).unwrap();
        let expected = 9 * 32 * 9 + 32 + 32 * 64 * 9 + 64 + 1664 * 1000 + 1000 + 1000 * 500 + 500 + 500 * 6 + 6;
        assert_eq!(expected, 2_189_626);
        assert_eq!(m.num_parameters(), expected);
        assert_eq!(m.feature_dim(), 500);
        assert_eq!(m.classes(), 6);
    }

    #[test]
    fn har_cnn_has_exactly_one_dropout() {
        let m = build_har_cnn::<f32>(0.2, 0).unwrap();
        let n = m
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Dropout { .. }))
            .count();
        assert_eq!(n, 1);
    }

    #[test]
    fn har_shape_algebra() {
        let m = build_har_cnn::<f32>(0.2, 0).unwrap();
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let x = tape.constant(random_batch(1, 9, 128, 1));
        let mut shapes = vec![tape.value(x).shape().to_vec()];
        let mut v = x;
        for layer in m.layers() {
            v = match *layer {
                Layer::Conv1d { weight, bias } => {
                    let y = tape.conv1d(v, params[weight]).unwrap();
                    tape.add_channel_bias(y, params[bias]).unwrap()
                }
                Layer::Linear { weight, bias } => tape.linear(v, params[weight], params[bias]).unwrap(),
                Layer::MaxPool1d { size, stride } => tape.max_pool1d(v, size, stride).unwrap(),
                Layer::Flatten => tape.reshape(v, &[1, tape.value(v).len()]).unwrap(),
                _ => continue,
            };
            if !matches!(layer, Layer::Relu) {
                shapes.push(tape.value(v).shape().to_vec());
            }
        }
        let expected: Vec<Vec<usize>> = vec![
            vec![1, 9, 128],
            vec![1, 32, 120],
            vec![1, 32, 60],
            vec![1, 64, 52],
            vec![1, 64, 26],
            vec![1, 1664],
            vec![1, 1000],
            vec![1, 500],
            vec![1, 6],
        ];
        assert_eq!(shapes, expected);
    }

    #[test]
    fn zero_input_gives_final_bias() {
        let mut m = build_har_cnn::<f32>(0.2, 3).unwrap();
        let bias: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect();
        let fc3 = m.params_mut().iter_mut().find(|p| p.name == "fc3.bias").unwrap();
        fc3.value = Tensor::new(&[6], bias.clone()).unwrap();
        let (_, logits) = m.forward(&Tensor::zeros(&[2, 9, 128]), &ForwardCtx::eval()).unwrap();
        assert_eq!(logits.row(0), bias.as_slice());
        assert_eq!(logits.row(1), bias.as_slice());
    }

    #[test]
    fn invalid_rate_is_config_error() {
        assert!(matches!(build_har_cnn::<f32>(1.0, 0), Err(Error::Config(_))));
        assert!(matches!(build_har_cnn::<f32>(-0.1, 0), Err(Error::Config(_))));
        let x = Tensor::<f32>::zeros(&[3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_apply(&x, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = build_har_cnn::<f32>(0.2, 1).unwrap();
        let x = random_batch(3, 9, 128, 2);
        let a = m.forward(&x, &ForwardCtx::eval()).unwrap();
        let b = m.forward(&x, &ForwardCtx::eval()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distill_forward_seeded_and_pass_dependent() {
        let m = build_har_cnn::<f32>(0.2, 1).unwrap();
        let x = random_batch(4, 9, 128, 2);
        let ids = [10, 11, 12, 13];
        let rng = RngStream::new(99);
        let run = |pass| {
            m.forward(&x, &ForwardCtx::stochastic(DropoutMode::Distill, rng, &ids, pass))
                .unwrap()
                .0
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn distill_with_zero_rate_equals_eval() {
        let m = build_har_cnn::<f32>(0.0, 1).unwrap();
        let x = random_batch(2, 9, 128, 5);
        let ctx = ForwardCtx::stochastic(DropoutMode::Distill, RngStream::new(1), &[0, 1], 3);
        assert_eq!(m.forward(&x, &ctx).unwrap(), m.forward(&x, &ForwardCtx::eval()).unwrap());
    }

    #[test]
    fn stochastic_features_match_full_passes() {
        let m = build_har_cnn::<f32>(0.2, 4).unwrap();
        let x = random_batch(3, 9, 128, 6);
        let ids = [7, 8, 9];
        let rng = RngStream::new(5);
        let block = m.stochastic_features(&x, &ids, 4, &rng, None).unwrap();
        assert_eq!(block.shape(), &[3, 4, 500]);
        for pass in 0..4u64 {
            let (f, _) = m
                .forward(&x, &ForwardCtx::stochastic(DropoutMode::Distill, rng, &ids, pass))
                .unwrap();
            for s in 0..3 {
                let row = &block.data()[(s * 4 + pass as usize) * 500..(s * 4 + pass as usize + 1) * 500];
                let diff = row
                    .iter()
                    .zip(f.row(s))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0f32, f32::max);
                assert!(diff <= 1e-5, "sample {s} pass {pass}: {diff}");
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f64>::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [DropoutMode::Train, DropoutMode::Eval, DropoutMode::Distill] {
            assert_eq!(dropout_apply(&x, 0.0, mode, &mut rng).unwrap(), x);
        }
        assert_eq!(dropout_apply(&x, 0.9, DropoutMode::Eval, &mut rng).unwrap(), x);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let x = Tensor::<f64>::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        for &p in &[0.1, 0.2, 0.5] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut acc = [0.0f64; 4];
            let trials = 100_000;
            for _ in 0..trials {
                let y = dropout_apply(&x, p, DropoutMode::Train, &mut rng).unwrap();
                acc.iter_mut().zip(y.data()).for_each(|(a, v)| *a += v);
            }
            for (a, &v) in acc.iter().zip(x.data()) {
                let mean = a / trials as f64;
                assert!(((mean - v) / v).abs() < 0.01, "p={p}: {mean} vs {v}");
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::zeros(&[1, 6]);
        assert!((softmax_cross_entropy(&uniform, &[0]).unwrap() - 6f64.ln()).abs() < 1e-12);
        let mut margin = vec![0.0; 6];
        margin[4] = 100.0;
        let l = Tensor::<f64>::from_f64(&[1, 6], &margin).unwrap();
        assert!(softmax_cross_entropy(&l, &[4]).unwrap() < 1e-8);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..15).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = [2, 0, 4];
        let logits = Tensor::<f64>::from_f64(&[3, 5], &vals).unwrap();
        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &vals[r * 5..r * 5 + 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[y].exp() / z).ln();
        }
        expected /= 3.0;
        assert!((softmax_cross_entropy(&logits, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mse_cases() {
        let z = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(mse(&z, &b).unwrap(), 12.5);
        assert_eq!(mse(&b, &b).unwrap(), 0.0);
        let c = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(mse(&b, &c), Err(Error::Dimension(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
        let v: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
        let direct = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 50.0;
        let got: f64 = mse(
            &Tensor::from_f64(&[50], &u).unwrap(),
            &Tensor::from_f64(&[50], &v).unwrap(),
        )
        .unwrap();
        assert!((got - direct).abs() < 1e-14);
    }

    #[test]
    fn mlp_builder_validates() {
        let ok = Architecture::Mlp {
            channels: 1,
            length: 16,
            hidden: vec![8, 4],
            classes: 3,
            dropout: 0.1,
        };
        let m = ok.build::<f32>(0).unwrap();
        assert_eq!(m.feature_dim(), 4);
        let bad = Architecture::Mlp {
            channels: 1,
            length: 16,
            hidden: vec![8],
            classes: 3,
            dropout: 0.1,
        };
        assert!(bad.build::<f32>(0).is_err());
    }
}
