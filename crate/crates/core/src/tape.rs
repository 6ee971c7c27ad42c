//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node. A node
//! keeps its backward data only when one of its inputs requires a gradient;
//! otherwise it is stored as a constant, so inference on a tape with no
//! trainable leaves records nothing differentiable.

use std::sync::atomic::{AtomicU32, Ordering};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{self, gemm, Scalar, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Conv1d { x: Var, w: Var, cols: Vec<T> },
    AddChannelBias { x: Var, bias: Var },
    Relu { x: Var },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    MulConst { x: Var, factor: Tensor<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Mean { x: Var },
    SoftmaxRows { x: Var, temperature: T },
    NormalizeRows { x: Var, sums: Vec<T> },
    RowDots { x: Var, reps: Tensor<T> },
    WeightedRows { w: Var, reps: Tensor<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    SoftCrossEntropy { logits: Var, target: Tensor<T>, probs: Tensor<T> },
    Mse { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    name: Option<String>,
}

pub struct Tape<T: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the trainable leaves after one backward sweep.
pub struct Gradients<T: Scalar = f32> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
    names: Vec<Option<String>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        self.grads[var.index].as_ref()
    }

    /// Gradients of all named leaves, in registration order.
    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.grads
            .into_iter()
            .zip(self.names)
            .filter_map(|(g, n)| Some((n?, g?)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what} needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank2<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dim(format!("{what} needs a matrix, got {s:?}"))),
    }
}

fn check_reps<T: Scalar>(what: &str, reps: &Tensor<T>, b: usize, last: usize, last_is_d: bool) -> Result<()> {
    let s = reps.shape();
    let ok = s.len() == 3 && s[0] == b && if last_is_d { s[2] == last } else { s[1] == last };
    if !ok {
        return Err(Error::dim(format!(
            "{what}: representation block {s:?} incompatible with batch {b} and extent {last}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Number of nodes that carry backward data.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            name,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.node(v).requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_node(value, rg, op, None)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, false, Op::Leaf, None)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, true, Op::Leaf, None)
    }

    /// A named leaf; trainable leaves are reported by [`Gradients::into_named`].
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Var {
        self.push_node(value, trainable, Op::Leaf, Some(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::MatMul { a, b }))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul_nt", av)?;
        let (n, k2) = rank2("matmul_nt", bv)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt needs [m×k]·[n×k]ᵀ, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), out.data_mut(), false);
        Ok(self.record(out, &[a, b], Op::MatMulNt { a, b }))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, c) = rank2("add_row_bias", xv)?;
        if bv.len() != c {
            return Err(Error::dim(format!(
                "bias {:?} does not match rows of width {c}",
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o = *o + b);
        }
        Ok(self.record(out, &[x, bias], Op::AddRowBias { x, bias }))
    }

    /// `x · wᵀ + bias` for a dense layer with weight `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_row_bias(y, bias)
    }

    /// Batched valid cross-correlation: `[B×C_in×L] ⋆ [C_out×C_in×K] → [B×C_out×(L−K+1)]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (out, cols) = tensor::conv1d_forward(self.value(x), self.value(w))?;
        let rg = self.node(x).requires_grad || self.node(w).requires_grad;
        let op = if rg { Op::Conv1d { x, w, cols } } else { Op::Leaf };
        Ok(self.push_node(out, rg, op, None))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() != 3 || bv.len() != xv.shape()[1] {
            return Err(Error::dim(format!(
                "channel bias {:?} incompatible with {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let (c, l) = (xv.shape()[1], xv.shape()[2]);
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(l).enumerate() {
            let b = bv.data()[i % c];
            plane.iter_mut().for_each(|o| *o = *o + b);
        }
        Ok(self.record(out, &[x, bias], Op::AddChannelBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v < T::zero() { T::zero() } else { *v });
        self.record(out, &[x], Op::Relu { x })
    }

    pub fn max_pool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = tensor::max_pool1d_forward(self.value(x), size, stride)?;
        Ok(self.record(out, &[x], Op::MaxPool1d { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, &[x], Op::Reshape { x }))
    }

    /// Elementwise product with a constant tensor (dropout masks, attention masks).
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        same_shape("mul_const", xv, &factor)?;
        let data = xv.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.record(out, &[x], Op::MulConst { x, factor }))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(what, av, bv)?;
        Tensor::new(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.record(out, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(out, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * c);
        self.record(out, &[x], Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.len()).unwrap();
        self.record(Tensor::scalar(m), &[x], Op::Mean { x })
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: Var, temperature: T) -> Result<Var> {
        if temperature <= T::zero() {
            return Err(Error::config("softmax temperature must be positive"));
        }
        let xv = self.value(x);
        let (_, c) = rank2("softmax_rows", xv)?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row, temperature);
        }
        Ok(self.record(out, &[x], Op::SoftmaxRows { x, temperature }))
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = rank2("normalize_rows", xv)?;
        let mut out = xv.clone();
        let mut sums = Vec::new();
        for row in out.data_mut().chunks_mut(c) {
            let s: T = row.iter().copied().sum();
            if s <= T::zero() {
                return Err(Error::Contract("normalize_rows on a row with non-positive sum".into()));
            }
            row.iter_mut().for_each(|v| *v = *v / s);
            sums.push(s);
        }
        Ok(self.record(out, &[x], Op::NormalizeRows { x, sums }))
    }

    /// `out[b, i] = ⟨reps[b, i, :], x[b, :]⟩` with constant `reps[B×n×d]`.
    pub fn row_dots(&mut self, x: Var, reps: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        let (b, d) = rank2("row_dots", xv)?;
        check_reps("row_dots", &reps, b, d, true)?;
        let n = reps.shape()[1];
        let mut out = Vec::with_capacity(b * n);
        for s in 0..b {
            let xs = xv.row(s);
            for i in 0..n {
                let r = &reps.data()[(s * n + i) * d..(s * n + i + 1) * d];
                out.push(r.iter().zip(xs).map(|(&p, &q)| p * q).sum());
            }
        }
        let out = Tensor::new(&[b, n], out)?;
        Ok(self.record(out, &[x], Op::RowDots { x, reps }))
    }

    /// `out[b, :] = Σ_i w[b, i] · reps[b, i, :]` with constant `reps[B×n×d]`.
    pub fn weighted_rows(&mut self, w: Var, reps: Tensor<T>) -> Result<Var> {
        let wv = self.value(w);
        let (b, n) = rank2("weighted_rows", wv)?;
        check_reps("weighted_rows", &reps, b, n, false)?;
        let d = reps.shape()[2];
        let mut out = vec![T::zero(); b * d];
        for s in 0..b {
            let o = &mut out[s * d..(s + 1) * d];
            for i in 0..n {
                let a = wv.data()[s * n + i];
                let r = &reps.data()[(s * n + i) * d..(s * n + i + 1) * d];
                o.iter_mut().zip(r).for_each(|(o, &v)| *o = *o + a * v);
            }
        }
        let out = Tensor::new(&[b, d], out)?;
        Ok(self.record(out, &[w], Op::WeightedRows { w, reps }))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = rank2("softmax_cross_entropy", lv)?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for (row, &y) in probs.data_mut().chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[y]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = loss / T::from_usize(b).unwrap();
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over the batch of `−Σ_k target[k] · log softmax(logits)[k]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = rank2("soft_cross_entropy", lv)?;
        same_shape("soft_cross_entropy", lv, &target)?;
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for (row, t) in probs.data_mut().chunks_mut(k).zip(target.data().chunks(k)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (v, &tk) in row.iter_mut().zip(t) {
                loss = loss - tk * (*v - lse);
                *v = (*v - lse).exp();
            }
        }
        let loss = loss / T::from_usize(b).unwrap();
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mse", av, bv)?;
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let m = s / T::from_usize(av.len()).unwrap();
        Ok(self.record(Tensor::scalar(m), &[a, b], Op::Mse { a, b }))
    }

    /// Propagates gradients from a scalar `loss` back to every trainable leaf.
    /// Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lnode = self.node(loss);
        if !lnode.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lnode.value.shape()
            )));
        }
        if !lnode.requires_grad {
            return Err(Error::EmptyGraph);
        }
        let id = self.id;
        let mut nodes = self.nodes;
        let is_leaf: Vec<bool> = nodes.iter().map(|n| matches!(n.op, Op::Leaf)).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(nodes[loss.index].value.shape(), T::one()));

        for i in (0..=loss.index).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            let node_value = &nodes[i].value;
            backward_op(&nodes, &mut grads, op, g, node_value);
        }

        let mut names = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.into_iter().enumerate() {
            let keep = n.requires_grad && is_leaf[i];
            if keep && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(n.value.shape()));
            }
            if !keep {
                grads[i] = None;
            }
            names.push(n.name);
        }
        Ok(Gradients {
            tape: id,
            grads,
            names,
        })
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, delta: Tensor<T>) {
    if !nodes[v.index].requires_grad {
        return;
    }
    match &mut grads[v.index] {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(delta),
    }
}

fn map_like<T: Scalar>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(like.shape(), data).expect("gradient shape")
}

fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    op: Op<T>,
    g: Tensor<T>,
    out: &Tensor<T>,
) {
    let val = |v: Var| &nodes[v.index].value;
    let needs = |v: Var| nodes[v.index].requires_grad;
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if needs(a) {
                let mut da = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), (n, 1), val(b).data(), (1, n), da.data_mut(), false);
                accumulate(grads, nodes, a, da);
            }
            if needs(b) {
                let mut db = Tensor::zeros(&[k, n]);
                gemm(k, m, n, val(a).data(), (1, k), g.data(), (n, 1), db.data_mut(), false);
                accumulate(grads, nodes, b, db);
            }
        }
        Op::MatMulNt { a, b } => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[0];
            if needs(a) {
                let mut da = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), (n, 1), val(b).data(), (k, 1), da.data_mut(), false);
                accumulate(grads, nodes, a, da);
            }
            if needs(b) {
                let mut db = Tensor::zeros(&[n, k]);
                gemm(n, m, k, g.data(), (1, n), val(a).data(), (k, 1), db.data_mut(), false);
                accumulate(grads, nodes, b, db);
            }
        }
        Op::AddRowBias { x, bias } => {
            if needs(bias) {
                let c = val(bias).len();
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                }
                accumulate(grads, nodes, bias, map_like(val(bias), db));
            }
            accumulate(grads, nodes, x, g);
        }
        Op::Conv1d { x, w, cols } => {
            let xs = val(x).shape();
            let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
            let (c_out, k) = (val(w).shape()[0], val(w).shape()[2]);
            let l_out = len - k + 1;
            let ck = c_in * k;
            if needs(w) {
                let mut dw = Tensor::zeros(val(w).shape());
                for b in 0..batch {
                    let gb = &g.data()[b * c_out * l_out..(b + 1) * c_out * l_out];
                    let cb = &cols[b * ck * l_out..(b + 1) * ck * l_out];
                    gemm(c_out, l_out, ck, gb, (l_out, 1), cb, (1, l_out), dw.data_mut(), true);
                }
                accumulate(grads, nodes, w, dw);
            }
            if needs(x) {
                let wd = val(w).data();
                let per_sample = parallel::map_range(batch, |b| {
                    let gb = &g.data()[b * c_out * l_out..(b + 1) * c_out * l_out];
                    let mut dcols = vec![T::zero(); ck * l_out];
                    gemm(ck, c_out, l_out, wd, (1, ck), gb, (l_out, 1), &mut dcols, false);
                    let mut dx = vec![T::zero(); c_in * len];
                    for ci in 0..c_in {
                        for j in 0..k {
                            let src = &dcols[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
                            let dst = &mut dx[ci * len + j..ci * len + j + l_out];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                    dx
                });
                accumulate(grads, nodes, x, map_like(val(x), per_sample.concat()));
            }
        }
        Op::AddChannelBias { x, bias } => {
            if needs(bias) {
                let (c, l) = (val(x).shape()[1], val(x).shape()[2]);
                let mut db = vec![T::zero(); c];
                for (i, plane) in g.data().chunks(l).enumerate() {
                    db[i % c] = db[i % c] + plane.iter().copied().sum();
                }
                accumulate(grads, nodes, bias, map_like(val(bias), db));
            }
            accumulate(grads, nodes, x, g);
        }
        Op::Relu { x } => {
            let data = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(grads, nodes, x, map_like(val(x), data));
        }
        Op::MaxPool1d { x, argmax } => {
            let mut dx = vec![T::zero(); val(x).len()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                dx[src] = dx[src] + gv;
            }
            accumulate(grads, nodes, x, map_like(val(x), dx));
        }
        Op::Reshape { x } => {
            let data = g.into_data();
            accumulate(grads, nodes, x, map_like(val(x), data));
        }
        Op::MulConst { x, factor } => {
            let data = g.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
            accumulate(grads, nodes, x, map_like(val(x), data));
        }
        Op::Add { a, b } => {
            accumulate(grads, nodes, b, g.clone());
            accumulate(grads, nodes, a, g);
        }
        Op::Sub { a, b } => {
            let neg = g.data().iter().map(|&v| -v).collect();
            accumulate(grads, nodes, b, map_like(&g, neg));
            accumulate(grads, nodes, a, g);
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, a, map_like(av, d));
            }
            if needs(b) {
                let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, b, map_like(bv, d));
            }
        }
        Op::Scale { x, c } => {
            let d = g.data().iter().map(|&v| v * c).collect();
            accumulate(grads, nodes, x, map_like(val(x), d));
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, x, Tensor::full(val(x).shape(), g.item()));
        }
        Op::Mean { x } => {
            let n = T::from_usize(val(x).len()).unwrap();
            accumulate(grads, nodes, x, Tensor::full(val(x).shape(), g.item() / n));
        }
        Op::SoftmaxRows { x, temperature } => {
            let c = out.shape()[1];
            let mut dx = Vec::with_capacity(out.len());
            for (y, gy) in out.data().chunks(c).zip(g.data().chunks(c)) {
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(gy).map(|(&yi, &gi)| yi * (gi - dot) / temperature));
            }
            accumulate(grads, nodes, x, map_like(val(x), dx));
        }
        Op::NormalizeRows { x, sums } => {
            let c = out.shape()[1];
            let mut dx = Vec::with_capacity(out.len());
            for ((y, gy), &s) in out.data().chunks(c).zip(g.data().chunks(c)).zip(&sums) {
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                dx.extend(gy.iter().map(|&gi| (gi - dot) / s));
            }
            accumulate(grads, nodes, x, map_like(val(x), dx));
        }
        Op::RowDots { x, reps } => {
            let (b, n, d) = (reps.shape()[0], reps.shape()[1], reps.shape()[2]);
            let mut dx = vec![T::zero(); b * d];
            for s in 0..b {
                let o = &mut dx[s * d..(s + 1) * d];
                for i in 0..n {
                    let gi = g.data()[s * n + i];
                    let r = &reps.data()[(s * n + i) * d..(s * n + i + 1) * d];
                    o.iter_mut().zip(r).for_each(|(o, &v)| *o = *o + gi * v);
                }
            }
            accumulate(grads, nodes, x, map_like(val(x), dx));
        }
        Op::WeightedRows { w, reps } => {
            let (b, n, d) = (reps.shape()[0], reps.shape()[1], reps.shape()[2]);
            let mut dw = Vec::with_capacity(b * n);
            for s in 0..b {
                let gs = &g.data()[s * d..(s + 1) * d];
                for i in 0..n {
                    let r = &reps.data()[(s * n + i) * d..(s * n + i + 1) * d];
                    dw.push(r.iter().zip(gs).map(|(&p, &q)| p * q).sum());
                }
            }
            accumulate(grads, nodes, w, map_like(val(w), dw));
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = probs.shape()[1];
            let scale = g.item() / T::from_usize(labels.len()).unwrap();
            let mut d = probs.into_data();
            for (row, &y) in d.chunks_mut(k).zip(&labels) {
                row[y] = row[y] - T::one();
                row.iter_mut().for_each(|v| *v = *v * scale);
            }
            accumulate(grads, nodes, logits, map_like(val(logits), d));
        }
        Op::SoftCrossEntropy {
            logits,
            target,
            probs,
        } => {
            let b = probs.shape()[0];
            let scale = g.item() / T::from_usize(b).unwrap();
            let d = probs
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| (p - t) * scale)
                .collect();
            accumulate(grads, nodes, logits, map_like(val(logits), d));
        }
        Op::Mse { a, b } => {
            let (av, bv) = (val(a), val(b));
            let scale = g.item() * T::from_f64_lossy(2.0) / T::from_usize(av.len()).unwrap();
            let da: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| (x - y) * scale)
                .collect();
            if needs(b) {
                let db = da.iter().map(|&v| -v).collect();
                accumulate(grads, nodes, b, map_like(bv, db));
            }
            accumulate(grads, nodes, a, map_like(av, da));
        }
    }
}
