//! Reverse sweep over the tape.

use super::ops::matmul_plan;
use super::tape::{Node, NodeId, Op, Tape};
use super::{for_each_broadcast, Real, Tensor};

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    id: NodeId,
    g: Tensor<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` (shaped like the broadcast output) back down to `target` shape.
fn reduce_to<T: Real>(g: &Tensor<T>, target: &[usize], map: impl Fn(usize, T) -> T) -> Tensor<T> {
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    let gd = g.data();
    for_each_broadcast(g.shape(), target, g.shape(), |i, it, _| {
        od[it] += map(i, gd[i]);
    });
    out
}

pub(crate) fn run<T: Real>(tape: &Tape<T>, loss: NodeId) {
    let nodes = tape.nodes.borrow();
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    if nodes[loss].requires_grad {
        grads[loss] = Some(Tensor::ones(nodes[loss].value.shape()));
    }

    for id in (0..=loss).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        propagate(&nodes, &mut grads, id, &g);
        grads[id] = Some(g);
    }
    drop(nodes);
    *tape.grads.borrow_mut() = grads;
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    g: &Tensor<T>,
) {
    let val = |i: NodeId| &*nodes[i].value;
    let rg = |i: NodeId| nodes[i].requires_grad;
    let out = &*nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let plan = matmul_plan(av.shape(), bv.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if rg(*a) {
                // dA = dC · Bᵀ
                let mut da = Tensor::zeros(av.shape());
                for &(o, ia, ib) in &plan.batches {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g.data()[o..],
                        n as isize,
                        1,
                        &bv.data()[ib..],
                        1,
                        n as isize,
                        true,
                        &mut da.data_mut()[ia..],
                        k as isize,
                        1,
                    );
                }
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                // dB = Aᵀ · dC
                let mut db = Tensor::zeros(bv.shape());
                for &(o, ia, ib) in &plan.batches {
                    T::gemm(
                        k,
                        m,
                        n,
                        &av.data()[ia..],
                        1,
                        k as isize,
                        &g.data()[o..],
                        n as isize,
                        1,
                        true,
                        &mut db.data_mut()[ib..],
                        n as isize,
                        1,
                    );
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Transpose { a } => {
            let s = g.shape();
            let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
            let mut da = Tensor::zeros(val(*a).shape());
            for (src, dst) in g.data().chunks(p * q).zip(da.data_mut().chunks_mut(p * q)) {
                for i in 0..p {
                    for j in 0..q {
                        dst[j * p + i] = src[i * q + j];
                    }
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(nodes[id].op, Op::Sub { .. }) {
                -T::one()
            } else {
                T::one()
            };
            if rg(*a) {
                let da = reduce_to(g, val(*a).shape(), |_, x| x);
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                let db = reduce_to(g, val(*b).shape(), |_, x| sign * x);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let mut da = Tensor::zeros(av.shape());
                let dd = da.data_mut();
                for_each_broadcast(g.shape(), av.shape(), bv.shape(), |i, ia, ib| {
                    dd[ia] += g.data()[i] * bv.data()[ib];
                });
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                let mut db = Tensor::zeros(bv.shape());
                let dd = db.data_mut();
                for_each_broadcast(g.shape(), av.shape(), bv.shape(), |i, ia, ib| {
                    dd[ib] += g.data()[i] * av.data()[ia];
                });
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Affine { a, scale } => {
            let s = *scale;
            accumulate(grads, nodes, *a, g.map(|x| x * s));
        }
        Op::Sigmoid { a } => {
            let d = zip_map(g, out, |gi, y| gi * y * (T::one() - y));
            accumulate(grads, nodes, *a, d);
        }
        Op::Tanh { a } => {
            let d = zip_map(g, out, |gi, y| gi * (T::one() - y * y));
            accumulate(grads, nodes, *a, d);
        }
        Op::Relu { a } => {
            let d = zip_map(g, val(*a), |gi, x| if x > T::zero() { gi } else { T::zero() });
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax { a } => {
            let w = *out.shape().last().unwrap_or(&1);
            let mut d = vec![T::zero(); out.len()];
            for ((dr, gr), yr) in d.chunks_mut(w).zip(g.data().chunks(w)).zip(out.data().chunks(w)) {
                let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                for j in 0..w {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::from_parts(out.shape().to_vec(), d));
        }
        Op::Concat { parts } => {
            let total = *out.shape().last().unwrap();
            let rows = out.len() / total;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let w = *pv.shape().last().unwrap();
                if rg(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, nodes, p, Tensor::from_parts(pv.shape().to_vec(), d));
                }
                offset += w;
            }
        }
        Op::Narrow { a, axis, start } => {
            let av = val(*a);
            let s = av.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let (dim, len) = (s[*axis], out.shape()[*axis]);
            let mut da = Tensor::zeros(s);
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = (o * dim + start) * inner;
                da.data_mut()[base..base + len * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Reshape { a } => {
            let da = Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec());
            accumulate(grads, nodes, *a, da);
        }
        Op::MaskedFill { a, mask } => {
            let d = g
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&x, &m)| if m { T::zero() } else { x })
                .collect();
            accumulate(grads, nodes, *a, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut dt = Tensor::zeros(tv.shape());
            let dd = dt.data_mut();
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dd[id * d + j] += g.data()[row * d + j];
                }
            }
            accumulate(grads, nodes, *table, dt);
        }
        Op::LayerNorm {
            a,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma);
            let d = gv.len();
            let rows = g.len() / d;
            let dn = T::from_usize(d).unwrap();
            if rg(*gamma) || rg(*beta) {
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for r in 0..rows {
                    for j in 0..d {
                        let gi = g.data()[r * d + j];
                        dgamma.data_mut()[j] += gi * xhat[r * d + j];
                        dbeta.data_mut()[j] += gi;
                    }
                }
                accumulate(grads, nodes, *gamma, dgamma);
                accumulate(grads, nodes, *beta, dbeta);
            }
            if rg(*a) {
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let k = inv_std[r] / dn;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        dx[r * d + j] = k * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                accumulate(grads, nodes, *a, Tensor::from_parts(g.shape().to_vec(), dx));
            }
        }
        Op::Sum { a } => {
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), g.item()));
        }
        Op::Mean { a } => {
            let av = val(*a);
            let n = T::from_usize(av.len()).unwrap();
            accumulate(grads, nodes, *a, Tensor::full(av.shape(), g.item() / n));
        }
        Op::SoftmaxNll {
            logits,
            targets,
            valid,
            probs,
            count,
        } => {
            let lv = val(*logits);
            let v = *lv.shape().last().unwrap();
            let k = g.item() / T::from_usize(*count).unwrap();
            let mut d = vec![T::zero(); lv.len()];
            for (r, ok) in valid.iter().enumerate() {
                if !ok {
                    continue;
                }
                for j in 0..v {
                    d[r * v + j] = probs[r * v + j] * k;
                }
                d[r * v + targets[r]] -= k;
            }
            accumulate(grads, nodes, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
        }
        Op::Dropout { a, keep } => {
            let d = g.data().iter().zip(keep).map(|(&x, &m)| x * m).collect();
            accumulate(grads, nodes, *a, Tensor::from_parts(g.shape().to_vec(), d));
        }
    }
}

fn zip_map<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}
