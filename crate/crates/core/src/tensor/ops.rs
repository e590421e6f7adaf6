//! Forward definitions of every differentiable operation.

use std::sync::Arc;

use rand::Rng;

use super::tape::{Op, Var};
use super::{broadcast_shape, for_each_broadcast, numel, Mask, Real, Tensor};
use crate::error::{Error, Result};

/// Batch layout of a (possibly broadcast) matrix product.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `(out, lhs, rhs)` element offsets of each matrix in the batch.
    pub batches: Vec<(usize, usize, usize)>,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(Error::dim("matmul", a, b));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let r = b[b.len() - 1];
    if b.len() == 2 {
        // Weight matrix: fold every leading dimension of the lhs into rows.
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(r);
        return Ok(MatmulPlan {
            m: numel(a) / q,
            k: q,
            n: r,
            batches: vec![(0, 0, 0)],
            out_shape,
        });
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let mut batches = Vec::with_capacity(numel(&batch));
    for_each_broadcast(&batch, ab, bb, |i, ia, ib| {
        batches.push((i * p * r, ia * p * q, ib * q * r));
    });
    let mut out_shape = batch;
    out_shape.extend([p, r]);
    Ok(MatmulPlan {
        m: p,
        k: q,
        n: r,
        batches,
        out_shape,
    })
}

fn narrow_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape
            .push(Arc::new(value), op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Arc::new(value), op, rg)
    }

    /// Matrix product over the last two dimensions; leading dimensions broadcast from 1.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let plan = matmul_plan(a.shape(), b.shape())?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for &(o, ia, ib) in &plan.batches {
            T::gemm(
                m,
                k,
                n,
                &a.data()[ia..],
                k as isize,
                1,
                &b.data()[ib..],
                n as isize,
                1,
                false,
                &mut out[o..],
                n as isize,
                1,
            );
        }
        let value = Tensor::from_parts(plan.out_shape, out);
        Ok(self.binary(
            other,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = a.shape();
        if s.len() < 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let mut out = vec![T::zero(); a.len()];
        for (src, dst) in a.data().chunks(p * q).zip(out.chunks_mut(p * q)) {
            for i in 0..p {
                for j in 0..q {
                    dst[j * p + i] = src[i * q + j];
                }
            }
        }
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Transpose { a: self.id }))
    }

    fn broadcast_binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::dim(name, a.shape(), b.shape()))?;
        let mut out = vec![T::zero(); numel(&shape)];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&shape, a.shape(), b.shape(), |i, ia, ib| {
            out[i] = f(ad[ia], bd[ib]);
        });
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.broadcast_binary(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.broadcast_binary(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.broadcast_binary(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul { a: self.id, b: other.id }))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: T, shift: T) -> Var<'t, T> {
        let v = self.value().map(|x| scale * x + shift);
        self.unary(v, Op::Affine { a: self.id, scale })
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        self.affine(factor, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'t, T> {
        self.affine(-T::one(), T::one())
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().map(|x| {
            // Branch on sign so exp never overflows.
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.unary(v, Op::Sigmoid { a: self.id })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh { a: self.id })
    }

    pub fn relu(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary(v, Op::Relu { a: self.id })
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&self) -> Var<'t, T> {
        let a = self.value();
        let w = *a.shape().last().unwrap_or(&1);
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        self.unary(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Softmax { a: self.id },
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) invalid for shape {s:?}"
            )));
        }
        let (outer, dim, inner) = narrow_layout(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape { a: self.id }))
    }

    /// Replaces masked positions with `value`; the mask must broadcast to this shape.
    pub fn masked_fill(&self, mask: &Mask, value: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let full = mask.broadcast_to(a.shape())?;
        let out: Vec<T> = a
            .data()
            .iter()
            .zip(full.data())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(self.unary(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::MaskedFill {
                a: self.id,
                mask: Arc::new(full),
            },
        ))
    }

    /// Row lookup: `ids` index rows of this `[V, d]` table; output shape is `id_shape + [d]`.
    pub fn embedding(&self, ids: &[usize], id_shape: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::dim("embedding", table.shape(), id_shape));
        }
        if numel(id_shape) != ids.len() {
            return Err(Error::Contract(format!(
                "{} ids do not fill shape {id_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes the last dimension, then applies per-feature `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let d = *a.shape().last().unwrap_or(&1);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim("layer_norm", a.shape(), g.shape()));
        }
        let rows = a.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); a.len()];
        let mut xhat = vec![T::zero(); a.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let x = &a.data()[r * d..(r + 1) * d];
            let mean = x.iter().copied().sum::<T>() / dn;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (x[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Arc::new(Tensor::from_parts(a.shape().to_vec(), out)),
            Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let a = self.value();
        let s = a.sum() / T::from_usize(a.len()).unwrap();
        self.unary(Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Mean of `-log softmax(logits)[target]` over rows where `valid` is set.
    ///
    /// Rows are the flattened leading dimensions of `[.., V]` logits.
    pub fn softmax_nll(&self, targets: &[usize], valid: &[bool]) -> Result<Var<'t, T>> {
        let a = self.value();
        let v = *a.shape().last().unwrap_or(&1);
        let rows = a.len() / v;
        if targets.len() != rows || valid.len() != rows {
            return Err(Error::Contract(format!(
                "softmax_nll: {rows} rows but {} targets / {} mask entries",
                targets.len(),
                valid.len()
            )));
        }
        let count = valid.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("loss over zero unmasked positions".into()));
        }
        let mut probs = a.data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let logits = &a.data()[r * v..(r + 1) * v];
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            softmax_in_place(row);
            if valid[r] {
                let t = targets[r];
                if t >= v {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: t,
                        size: v,
                    });
                }
                total += lse - logits[t];
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::SoftmaxNll {
                logits: self.id,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Var<'t, T> {
        if rate <= 0.0 {
            return *self;
        }
        let a = self.value();
        let scale = T::lit(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..a.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = a.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        self.unary(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Dropout { a: self.id, keep },
        )
    }
}

impl<T: Real> super::Tape<T> {
    /// Concatenates along the last dimension.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values[1..] {
            if v.rank() != values[0].rank() || &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::dim("concat", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            Arc::new(Tensor::from_parts(shape, out)),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
