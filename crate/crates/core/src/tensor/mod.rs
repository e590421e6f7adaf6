//! Dense tensors and the reverse-mode tape built on top of them.
//!
//! [`Tensor`] is a plain row-major value with a shape. Differentiable
//! computation happens on a [`Tape`]: inputs are registered as leaves, every
//! operation appends a record, and [`Var::backward`] replays the records in
//! reverse to accumulate gradients.

mod backward;
mod grad_check;
mod ops;
mod real;
mod tape;

pub use grad_check::grad_check;
pub use real::{Dtype, Real};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape was already validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Converts element type, e.g. for comparing an `f32` run against `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }
}

/// Boolean tensor used for attention and padding masks. `true` means masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "mask shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn none(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![false; numel(shape)],
        }
    }

    /// `[1, len, len]` mask hiding positions after the query position.
    pub fn causal(len: usize) -> Self {
        let mut data = vec![false; len * len];
        for q in 0..len {
            for k in q + 1..len {
                data[q * len + k] = true;
            }
        }
        Mask {
            shape: vec![1, len, len],
            data,
        }
    }

    /// `[B, 1, Lk]` mask from a `[B, Lk]` validity table (`true` = real key).
    pub fn from_key_validity(valid: &[bool], batch: usize) -> Result<Self> {
        if batch == 0 || !valid.len().is_multiple_of(batch) || valid.is_empty() {
            return Err(Error::Contract(format!(
                "key validity of length {} does not split into {batch} rows",
                valid.len()
            )));
        }
        let lk = valid.len() / batch;
        Mask::new(&[batch, 1, lk], valid.iter().map(|v| !v).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, index: &[usize]) -> bool {
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            off = off * d + i;
        }
        self.data[off]
    }

    /// Elementwise OR after broadcasting both masks to a common shape.
    pub fn or(&self, other: &Mask) -> Result<Mask> {
        let shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::dim("mask_or", &self.shape, &other.shape))?;
        let mut data = Vec::with_capacity(numel(&shape));
        for_each_broadcast(&shape, &self.shape, &other.shape, |_, ia, ib| {
            data.push(self.data[ia] || other.data[ib]);
        });
        Ok(Mask { shape, data })
    }

    /// Expands the mask to exactly `shape`; fails if that needs more than size-1 expansion.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Mask> {
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::dim("mask_broadcast", &self.shape, shape)),
        }
        let mut data = Vec::with_capacity(numel(shape));
        for_each_broadcast(shape, &self.shape, shape, |_, ia, _| data.push(self.data[ia]));
        Ok(Mask {
            shape: shape.to_vec(),
            data,
        })
    }
}

/// Shape obtained by expanding size-1 dimensions; ranks are aligned on the right.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` aligned to `out`, with zero stride on broadcast dims.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast `out` shape.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}
