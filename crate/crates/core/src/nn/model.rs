use crate::error::{Error, Result};
use crate::nn::arch::Architecture;
use crate::nn::{dropout_mask, DropoutMode};
use crate::parallel;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d { weight: usize, bias: usize },
    Linear { weight: usize, bias: usize },
    Relu,
    MaxPool1d { size: usize, stride: usize },
    Flatten,
    Dropout { p: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: String, value: Tensor<T>) -> Self {
        Self {
            name,
            value,
            trainable: true,
        }
    }
}

/// Per-call forward settings: dropout behaviour and which random stream each
/// batch row draws its masks from.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub mode: DropoutMode,
    rng: Option<RngStream>,
    rows: Vec<(u64, u64)>,
    rate: Option<f64>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: DropoutMode::Eval,
            rng: None,
            rows: Vec::new(),
            rate: None,
        }
    }

    /// Row `r` draws from `(sample_ids[r], pass)`.
    pub fn stochastic(mode: DropoutMode, rng: RngStream, sample_ids: &[u64], pass: u64) -> Self {
        Self::with_rows(mode, rng, sample_ids.iter().map(|&s| (s, pass)).collect())
    }

    pub fn with_rows(mode: DropoutMode, rng: RngStream, rows: Vec<(u64, u64)>) -> Self {
        Self {
            mode,
            rng: Some(rng),
            rows,
            rate: None,
        }
    }

    /// Overrides the rate of every dropout site for this call.
    pub fn with_rate(mut self, p: f64) -> Self {
        self.rate = Some(p);
        self
    }
}

/// Tape handles for the two model outputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    feature_tap: usize,
}

impl<T: Scalar> Model<T> {
    pub(crate) fn from_parts(
        arch: Architecture,
        layers: Vec<Layer>,
        params: Vec<Param<T>>,
        feature_tap: usize,
    ) -> Self {
        Self {
            arch,
            layers,
            params,
            feature_tap,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Index of the layer whose output is the feature vector.
    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[..=self.feature_tap]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear { weight, .. } => Some(self.params[*weight].value.shape()[0]),
                _ => None,
            })
            .expect("feature tap follows a dense layer")
    }

    /// Marks every parameter as non-trainable.
    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn unfreeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Copies parameter values from `other`, which must share names and shapes.
    pub fn copy_params_from(&mut self, other: &Model<T>) -> Result<()> {
        check_compatible(self, other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            feature_tap: self.feature_tap,
        }
    }

    /// Places every parameter on the tape as a named leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(&p.name, p.value.clone(), p.trainable))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, l) = self.arch.input_shape();
        if shape.len() != 3 || shape[1] != c || shape[2] != l {
            return Err(Error::dim(format!(
                "model expects input [B×{c}×{l}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Runs the network on `input` (`[B×C×L]`) using parameters bound by [`Model::bind`].
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        ctx: &ForwardCtx,
    ) -> Result<ForwardVars> {
        self.check_input(tape.value(input).shape())?;
        let (features, logits) = self.run_layers(tape, params, input, ctx, 0, self.layers.len())?;
        Ok(ForwardVars {
            features: features.expect("feature tap inside the layer range"),
            logits,
        })
    }

    /// Inference without gradient recording. Returns `(features [B×d], logits [B×K])`.
    pub fn forward(&self, batch: &Tensor<T>, ctx: &ForwardCtx) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let x = tape.constant(batch.clone());
        let out = self.forward_tape(&mut tape, &params, x, ctx)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    /// Feature vectors from `n` independent dropout passes per sample, as a
    /// `[B×n×d]` block. Pass `i` of sample `s` at dropout site `l` draws its
    /// mask from `rng.child(l).rng(sample_ids[s], i)`.
    ///
    /// Layers ahead of the first dropout site are deterministic, so they run
    /// once per sample and only the stochastic suffix is replayed per pass.
    pub fn stochastic_features(
        &self,
        batch: &Tensor<T>,
        sample_ids: &[u64],
        n: usize,
        rng: &RngStream,
        rate: Option<f64>,
    ) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let b = batch.shape()[0];
        if sample_ids.len() != b {
            return Err(Error::dim(format!(
                "{} sample ids for a batch of {b}",
                sample_ids.len()
            )));
        }
        if n == 0 {
            return Err(Error::config("number of stochastic passes must be ≥ 1"));
        }
        let split = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Dropout { .. }))
            .filter(|&i| i <= self.feature_tap)
            .unwrap_or(self.feature_tap + 1);

        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let x = tape.constant(batch.clone());
        let eval = ForwardCtx::eval();
        let (_, prefix) = self.run_layers(&mut tape, &params, x, &eval, 0, split)?;
        let prefix = tape.value(prefix);
        let w = prefix.row_len();
        let rows: Vec<(u64, u64)> = sample_ids
            .iter()
            .flat_map(|&sid| (0..n as u64).map(move |pass| (sid, pass)))
            .collect();

        // The first dropout site is fused with the replication: row `r` is
        // prefix row `r / n` times its own mask.
        let site = match self.layers.get(split) {
            Some(&Layer::Dropout { p }) if split <= self.feature_tap => Some(rate.unwrap_or(p)),
            _ => None,
        };
        let mut replicated = vec![T::zero(); b * n * w];
        let site_rng = rng.child(split as u64);
        if let Some(p) = site {
            crate::nn::arch::check_rate(p)?;
        }
        parallel::for_each_chunk_mut(&mut replicated, w, |r, out| {
            let src = prefix.row(r / n);
            match site {
                Some(p) if p > 0.0 => {
                    let (sid, pass) = rows[r];
                    let mask = dropout_mask::<T>(w, p, &mut site_rng.rng(sid, pass));
                    out.iter_mut()
                        .zip(src.iter().zip(&mask))
                        .for_each(|(o, (&a, &m))| *o = a * m);
                }
                _ => out.copy_from_slice(src),
            }
        });
        let mut shape = prefix.shape().to_vec();
        shape[0] = b * n;
        let expanded = tape.constant(Tensor::new(&shape, replicated)?);
        let start = if site.is_some() { split + 1 } else { split };
        let mut ctx = ForwardCtx::with_rows(DropoutMode::Distill, *rng, rows);
        ctx.rate = rate;
        let (features, _) =
            self.run_layers(&mut tape, &params, expanded, &ctx, start, self.feature_tap + 1)?;
        let features = match features {
            Some(f) => tape.value(f).clone(),
            None => tape.value(expanded).clone(),
        };
        let d = features.row_len();
        features.reshape(&[b, n, d])
    }

    fn run_layers(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        mut x: Var,
        ctx: &ForwardCtx,
        start: usize,
        end: usize,
    ) -> Result<(Option<Var>, Var)> {
        let mut features = None;
        for (i, layer) in self.layers.iter().enumerate().take(end).skip(start) {
            x = match *layer {
                Layer::Conv1d { weight, bias } => {
                    let y = tape.conv1d(x, params[weight])?;
                    tape.add_channel_bias(y, params[bias])?
                }
                Layer::Linear { weight, bias } => tape.linear(x, params[weight], params[bias])?,
                Layer::Relu => tape.relu(x),
                Layer::MaxPool1d { size, stride } => tape.max_pool1d(x, size, stride)?,
                Layer::Flatten => {
                    let v = tape.value(x);
                    let shape = [v.rows(), v.row_len()];
                    tape.reshape(x, &shape)?
                }
                Layer::Dropout { p } => self.apply_dropout(tape, x, ctx.rate.unwrap_or(p), ctx, i)?,
            };
            if i == self.feature_tap {
                features = Some(x);
            }
        }
        Ok((features, x))
    }

    fn apply_dropout(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        p: f64,
        ctx: &ForwardCtx,
        site: usize,
    ) -> Result<Var> {
        crate::nn::arch::check_rate(p)?;
        if ctx.mode == DropoutMode::Eval || p == 0.0 {
            return Ok(x);
        }
        let rng = ctx
            .rng
            .ok_or_else(|| Error::Contract("stochastic forward needs a random stream".into()))?
            .child(site as u64);
        let v = tape.value(x);
        let (rows, width) = (v.rows(), v.row_len());
        if ctx.rows.len() != rows {
            return Err(Error::dim(format!(
                "{} random streams for {rows} batch rows",
                ctx.rows.len()
            )));
        }
        let masks = parallel::map_range(rows, |r| {
            let (sample, pass) = ctx.rows[r];
            dropout_mask::<T>(width, p, &mut rng.rng(sample, pass))
        });
        let mask = Tensor::new(v.shape(), masks.concat())?;
        tape.mul_const(x, mask)
    }
}

pub(crate) fn check_compatible<T: Scalar, U: Scalar>(a: &Model<T>, b: &Model<U>) -> Result<()> {
    if a.params.len() != b.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: {} vs {}",
            a.params.len(),
            b.params.len()
        )));
    }
    for (p, q) in a.params.iter().zip(&b.params) {
        if p.name != q.name || p.value.shape() != q.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: {} {:?} vs {} {:?}",
                p.name,
                p.value.shape(),
                q.name,
                q.value.shape()
            )));
        }
    }
    Ok(())
}
