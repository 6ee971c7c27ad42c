//! Dense row-major tensors and the numeric kernels behind the tape operations.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::parallel;

/// Floating-point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{:?}, ...]", self.shape, &self.data[..8])
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Row `i` of a tensor viewed as `shape[0] × rest`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all extents after the first.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.rows()
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Self::new(&shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

const GEMM_ROW_CHUNK: usize = 64;

/// `C (+)= A·B` where `A` is `m×k` with strides `(rsa, csa)`, `B` is `k×n`
/// with strides `(rsb, csb)` and `C` is a contiguous row-major `m×n` slice.
///
/// Rows of `C` are processed in fixed chunks on both the parallel and the
/// sequential path so the results are bit-identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm lhs bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm rhs bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    let a_ptr = a.as_ptr() as usize;
    parallel::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |chunk_idx, c_chunk| {
        let rows = c_chunk.len() / n;
        let row0 = chunk_idx * GEMM_ROW_CHUNK;
        // SAFETY: bounds asserted above; each chunk writes a disjoint row block of C.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                (a_ptr as *const T).add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Standard matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul needs [m×k]·[k×n], got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out.data, false);
    Ok(out)
}

/// Valid 1-D cross-correlation (stride 1, no padding, no kernel flip) of a
/// single `C_in×L` signal with `C_out×C_in×K` kernels.
pub fn conv1d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 2 {
        return Err(Error::dim(format!(
            "conv1d input must be [C_in×L], got {:?}",
            input.shape
        )));
    }
    let batched = input.reshape(&[1, input.shape[0], input.shape[1]])?;
    let (out, _) = conv1d_forward(&batched, kernels)?;
    out.reshape(&out.shape[1..])
}

/// Unfolded input for one batch: sample `b` owns a contiguous
/// `(C_in·K) × L_out` block with `cols[ci·K + j, t] = x[b, ci, t + j]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], batch: usize, c_in: usize, len: usize, k: usize) -> Vec<T> {
    let l_out = len - k + 1;
    let block = c_in * k * l_out;
    let mut cols = vec![T::zero(); batch * block];
    for b in 0..batch {
        for ci in 0..c_in {
            let src = &x[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
            for j in 0..k {
                let row = b * block + (ci * k + j) * l_out;
                cols[row..row + l_out].copy_from_slice(&src[j..j + l_out]);
            }
        }
    }
    cols
}

pub(crate) fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 || x.shape[1] != w.shape[1] {
        return Err(Error::dim(format!(
            "conv1d needs input [B×C_in×L] and kernels [C_out×C_in×K], got {:?} and {:?}",
            x.shape, w.shape
        )));
    }
    let (batch, c_in, len) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, k) = (w.shape[0], w.shape[2]);
    if len < k {
        return Err(Error::dim(format!(
            "conv1d input length {len} shorter than kernel {k}"
        )));
    }
    Ok((batch, c_in, len, c_out, k))
}

/// Batched convolution; returns the output and the unfolded input for backward.
pub(crate) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (batch, c_in, len, c_out, k) = conv_dims(x, w)?;
    let l_out = len - k + 1;
    let cols = im2col(&x.data, batch, c_in, len, k);
    let ck = c_in * k;
    let mut out = Tensor::zeros(&[batch, c_out, l_out]);
    for b in 0..batch {
        let col_b = &cols[b * ck * l_out..(b + 1) * ck * l_out];
        let out_b = &mut out.data[b * c_out * l_out..(b + 1) * c_out * l_out];
        gemm(c_out, ck, l_out, &w.data, (ck, 1), col_b, (l_out, 1), out_b, false);
    }
    Ok((out, cols))
}

/// Max pooling over the last axis of `[B×C×L]`; ties resolve to the lowest index.
pub(crate) fn max_pool1d_forward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 3 || x.shape[2] < size || size == 0 || stride == 0 {
        return Err(Error::dim(format!(
            "max_pool1d({size}, stride {stride}) cannot pool shape {:?}",
            x.shape
        )));
    }
    let (b, c, len) = (x.shape[0], x.shape[1], x.shape[2]);
    let l_out = (len - size) / stride + 1;
    let mut out = Vec::with_capacity(b * c * l_out);
    let mut argmax = Vec::with_capacity(b * c * l_out);
    for plane in 0..b * c {
        let src = &x.data[plane * len..(plane + 1) * len];
        for t in 0..l_out {
            let start = t * stride;
            let mut best = start;
            for i in start + 1..start + size {
                if src[i] > src[best] {
                    best = i;
                }
            }
            out.push(src[best]);
            argmax.push(plane * len + best);
        }
    }
    Ok((Tensor::new(&[b, c, l_out], out)?, argmax))
}
