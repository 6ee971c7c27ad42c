use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Layer, Model, Param};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Serializable description of a network; rebuilding from it yields the same
/// layer graph and parameter names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Two conv+pool stages and three dense layers; the 9×128 / 6-class
    /// instance is the HAR network.
    Cnn1d {
        channels: usize,
        length: usize,
        classes: usize,
        dropout: f64,
    },
    /// Flatten, dense stack with ReLU, one dropout after the first hidden layer.
    Mlp {
        channels: usize,
        length: usize,
        hidden: Vec<usize>,
        classes: usize,
        dropout: f64,
    },
}

pub const HAR_CHANNELS: usize = 9;
pub const HAR_LENGTH: usize = 128;
pub const HAR_CLASSES: usize = 6;

const CONV_KERNEL: usize = 9;
const POOL: usize = 2;

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout rate {p} must lie in [0, 1)")));
    }
    Ok(())
}

impl Architecture {
    pub fn har_cnn(dropout: f64) -> Self {
        Architecture::Cnn1d {
            channels: HAR_CHANNELS,
            length: HAR_LENGTH,
            classes: HAR_CLASSES,
            dropout,
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        match *self {
            Architecture::Cnn1d {
                channels, length, ..
            }
            | Architecture::Mlp {
                channels, length, ..
            } => (channels, length),
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Cnn1d { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    pub fn dropout(&self) -> f64 {
        match *self {
            Architecture::Cnn1d { dropout, .. } | Architecture::Mlp { dropout, .. } => dropout,
        }
    }

    /// Builds a model with Kaiming-uniform weights and zero biases.
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Model<T>> {
        check_rate(self.dropout())?;
        let mut b = Builder::new(seed);
        match self {
            Architecture::Cnn1d {
                channels,
                length,
                classes,
                dropout,
            } => {
                let (c, l, k) = (*channels, *length, *classes);
                if c == 0 || k < 2 {
                    return Err(Error::config("cnn needs ≥1 channel and ≥2 classes"));
                }
                let l1 = conv_pool_len(l)?;
                let l2 = conv_pool_len(l1)?;
                b.conv("conv1", c, 32);
                b.layers.push(Layer::Relu);
                b.layers.push(Layer::MaxPool1d {
                    size: POOL,
                    stride: POOL,
                });
                b.conv("conv2", 32, 64);
                b.layers.push(Layer::Relu);
                b.layers.push(Layer::MaxPool1d {
                    size: POOL,
                    stride: POOL,
                });
                b.layers.push(Layer::Flatten);
                b.linear("fc1", 64 * l2, 1000);
                b.layers.push(Layer::Relu);
                b.layers.push(Layer::Dropout { p: *dropout });
                b.linear("fc2", 1000, 500);
                b.layers.push(Layer::Relu);
                let tap = b.layers.len() - 1;
                b.linear("fc3", 500, k);
                Ok(b.finish(self.clone(), tap))
            }
            Architecture::Mlp {
                channels,
                length,
                hidden,
                classes,
                dropout,
            } => {
                if hidden.len() < 2 || hidden.contains(&0) || *classes < 2 {
                    return Err(Error::config(
                        "mlp needs at least two non-empty hidden layers and ≥2 classes",
                    ));
                }
                b.layers.push(Layer::Flatten);
                let mut width = channels * length;
                for (i, &h) in hidden.iter().enumerate() {
                    b.linear(&format!("fc{}", i + 1), width, h);
                    b.layers.push(Layer::Relu);
                    if i == 0 {
                        b.layers.push(Layer::Dropout { p: *dropout });
                    }
                    width = h;
                }
                let tap = b.layers.len() - 1;
                b.linear(&format!("fc{}", hidden.len() + 1), width, *classes);
                Ok(b.finish(self.clone(), tap))
            }
        }
    }
}

fn conv_pool_len(l: usize) -> Result<usize> {
    if l < CONV_KERNEL + POOL - 1 {
        return Err(Error::config(format!(
            "input length {l} too short for a kernel-{CONV_KERNEL} conv and pool"
        )));
    }
    Ok((l - CONV_KERNEL + 1 - POOL) / POOL + 1)
}

/// HAR network with the given dropout rate.
pub fn build_har_cnn<T: Scalar>(p: f64, seed: u64) -> Result<Model<T>> {
    Architecture::har_cnn(p).build(seed)
}

struct Builder<T: Scalar> {
    rng: rand_chacha::ChaCha8Rng,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64) -> Self {
        Self {
            rng: RngStream::new(seed).child(0x1417).sequential(),
            layers: Vec::new(),
            params: Vec::new(),
        }
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        use rand::Rng;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }

    fn push_param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) {
        let w = self.kaiming(&[c_out, c_in, CONV_KERNEL], c_in * CONV_KERNEL);
        let weight = self.push_param(format!("{name}.weight"), w);
        let bias = self.push_param(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        self.layers.push(Layer::Conv1d { weight, bias });
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let w = self.kaiming(&[d_out, d_in], d_in);
        let weight = self.push_param(format!("{name}.weight"), w);
        let bias = self.push_param(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        self.layers.push(Layer::Linear { weight, bias });
    }

    fn finish(self, arch: Architecture, feature_tap: usize) -> Model<T> {
        Model::from_parts(arch, self.layers, self.params, feature_tap)
    }
}
