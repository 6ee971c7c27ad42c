use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// `momentum` applies to SGD; `beta1`, `beta2` and `eps` to Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(0.05)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay: 0.0,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// First-order optimizer state keyed by parameter name. Weight decay is an
/// L2 term added to the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f32> {
    cfg: OptimizerConfig,
    lr: f64,
    step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lr: cfg.lr,
            cfg,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, model: &mut Model<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let lr = T::from_f64_lossy(self.lr);
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        for p in model.params_mut().iter_mut().filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let grad = |i: usize, w: T| g.data()[i] + wd * w;
            let n = p.value.len();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let momentum = self.cfg.momentum;
                    if momentum == 0.0 {
                        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                            *w = *w - lr * grad(i, *w);
                        }
                    } else {
                        let mu = T::from_f64_lossy(momentum);
                        let v = self.first.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
                        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                            v[i] = mu * v[i] + grad(i, *w);
                            *w = *w - lr * v[i];
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let (beta1, beta2) = (self.cfg.beta1, self.cfg.beta2);
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let c1 = T::from_f64_lossy(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::from_f64_lossy(1.0 - beta2.powi(self.step as i32));
                    let eps = T::from_f64_lossy(self.cfg.eps);
                    let m = self.first.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    let v = self.second.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad(i, *w);
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
