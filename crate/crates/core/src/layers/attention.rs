use rand::Rng;

use super::path;
use crate::error::{Error, Result};
use crate::params::{init_uniform, Bound, ParamSet};
use crate::tensor::{Mask, Real, Tensor, Var};

/// Score written into masked positions before the softmax.
pub const MASK_FILL: f64 = -1e9;

/// Output of one scaled dot-product attention call.
#[derive(Clone, Copy, Debug)]
pub struct Attention<'t, T: Real = f64> {
    /// `[.., Lq, dv]`
    pub output: Var<'t, T>,
    /// `[.., Lq, Lk]` softmax weights; rows of fully masked queries are zero.
    pub weights: Var<'t, T>,
    /// Query rows whose every key was masked; their output is the zero vector.
    pub fully_masked_rows: usize,
}

/// `softmax(Q Kᵀ / √dk) V`, with `true` mask entries excluded from the softmax.
pub fn scaled_dot_attention<'t, T: Real>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    mask: Option<&Mask>,
) -> Result<Attention<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let dk = *qs.last().unwrap_or(&0);
    if qs.len() < 2 || ks.len() != qs.len() || vs.len() != qs.len() {
        return Err(Error::dim("attention", &qs, &ks));
    }
    if ks.last() != Some(&dk) || ks[ks.len() - 2] != vs[vs.len() - 2] {
        return Err(Error::dim("attention", &ks, &vs));
    }
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let mut scores = q.matmul(&k.transpose()?)?.scale(scale);
    let mut fully_masked_rows = 0;
    let mut row_keep = None;
    if let Some(mask) = mask {
        let score_shape = scores.shape();
        let full = mask.broadcast_to(&score_shape)?;
        let lk = *score_shape.last().unwrap();
        let keep: Vec<T> = full
            .data()
            .chunks(lk)
            .map(|row| {
                if row.iter().all(|&m| m) {
                    fully_masked_rows += 1;
                    T::zero()
                } else {
                    T::one()
                }
            })
            .collect();
        if fully_masked_rows > 0 {
            let mut shape = score_shape.clone();
            *shape.last_mut().unwrap() = 1;
            row_keep = Some(Tensor::from_parts(shape, keep));
        }
        scores = scores.masked_fill(&full, T::lit(MASK_FILL))?;
    }
    let mut weights = scores.softmax();
    if let Some(keep) = row_keep {
        weights = weights.mul(&q.tape().constant(keep))?;
    }
    Ok(Attention {
        output: weights.matmul(v)?,
        weights,
        fully_masked_rows,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct HeadProjection<'t, T: Real = f64> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
}

/// Per-head `d × d/H` projections and the `d × d` output map.
#[derive(Clone, Debug)]
pub struct MhaParams<'t, T: Real = f64> {
    pub heads: Vec<HeadProjection<'t, T>>,
    pub w_o: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct MhaOutput<'t, T: Real = f64> {
    /// `[.., Lq, d]`
    pub output: Var<'t, T>,
    /// One `[.., Lq, Lk]` weight tensor per head.
    pub weights: Vec<Var<'t, T>>,
    pub fully_masked_rows: usize,
}

impl<'t, T: Real> MhaParams<'t, T> {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<()> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        for i in 0..heads {
            for name in ["w_q", "w_k", "w_v"] {
                set.insert(path(prefix, &format!("head{i}.{name}")), init_uniform(rng, d, dh))?;
            }
        }
        set.insert(path(prefix, "w_o"), init_uniform(rng, d, d))
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str, heads: usize) -> Result<Self> {
        let heads = (0..heads)
            .map(|i| {
                let get = |n: &str| params.get(&path(prefix, &format!("head{i}.{n}")));
                Ok(HeadProjection {
                    w_q: get("w_q")?,
                    w_k: get("w_k")?,
                    w_v: get("w_v")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MhaParams {
            heads,
            w_o: params.get(&path(prefix, "w_o"))?,
        })
    }

    pub fn width(&self) -> usize {
        self.w_o.shape()[0]
    }
}

/// `Concat(M_1..M_H) W^O` with `M_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
///
/// Each head uses its own key width `d/H` in the score scale.
pub fn multi_head_attention<'t, T: Real>(
    p: &MhaParams<'t, T>,
    q_in: &Var<'t, T>,
    k_in: &Var<'t, T>,
    v_in: &Var<'t, T>,
    mask: Option<&Mask>,
) -> Result<MhaOutput<'t, T>> {
    let d = p.width();
    let h = p.heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(Error::Config(format!("width {d} not divisible by {h} heads")));
    }
    let mut outputs = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    let mut fully_masked_rows = 0;
    for head in &p.heads {
        let att = scaled_dot_attention(
            &q_in.matmul(&head.w_q)?,
            &k_in.matmul(&head.w_k)?,
            &v_in.matmul(&head.w_v)?,
            mask,
        )?;
        fully_masked_rows = fully_masked_rows.max(att.fully_masked_rows);
        outputs.push(att.output);
        weights.push(att.weights);
    }
    let concat = if outputs.len() == 1 {
        outputs[0]
    } else {
        q_in.tape().concat(&outputs)?
    };
    Ok(MhaOutput {
        output: concat.matmul(&p.w_o)?,
        weights,
        fully_masked_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_normal;
    use crate::tensor::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        init_normal::<f64, _>(rng, n, 1, 1.0).reshape(shape).unwrap()
    }

    #[test]
    fn singleton_key_returns_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 2, 3], &[1., 2., 3., -4., 5., 0.5]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.1, 0.2, 0.3]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[1, 1, 2], &[7.0, -8.0]).unwrap());
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.output.value().data(), &[7.0, -8.0, 7.0, -8.0]);
    }

    #[test]
    fn equal_keys_average_values() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[0.3, -2.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[3, 2], &[1., 1., 1., 1., 1., 1.]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 6.0]).unwrap());
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!((out.output.item() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_case_weights_point_eight() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[2, 1], &[0.0, 4f64.ln()]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap());
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        // softmax([0, ln 4]) = [1/5, 4/5]
        assert!((out.weights.value().data()[1] - 0.8).abs() < 1e-15);
        assert!((out.output.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn masked_keys_get_no_weight_and_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f64>::new();
        let q = tape.constant(rand_t(&mut rng, &[2, 3, 4]));
        let kt = rand_t(&mut rng, &[2, 5, 4]);
        let vt = rand_t(&mut rng, &[2, 5, 1]);
        let mask = Mask::from_key_validity(
            &[true, true, false, true, false, true, false, false, false, false],
            2,
        )
        .unwrap();
        let out = scaled_dot_attention(&q, &tape.constant(kt.clone()), &tape.constant(vt.clone()), Some(&mask)).unwrap();
        let w = out.weights.value();
        for b in 0..2 {
            for i in 0..3 {
                let row: Vec<f64> = (0..5).map(|j| w.at(&[b, i, j])).collect();
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..5 {
                    if mask.get(&[b, 0, j]) {
                        assert!(row[j] < 1e-6);
                    }
                }
            }
        }
        // convex hull when dv = 1
        let o = out.output.value();
        for b in 0..2 {
            let allowed: Vec<f64> = (0..5).filter(|&j| !mask.get(&[b, 0, j])).map(|j| vt.at(&[b, j, 0])).collect();
            let lo = allowed.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = allowed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..3 {
                let x = o.at(&[b, i, 0]);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
        // perturb masked keys and values
        let mut k2 = kt.clone();
        let mut v2 = vt.clone();
        for b in 0..2 {
            for j in 0..5 {
                if mask.get(&[b, 0, j]) {
                    v2.data_mut()[b * 5 + j] += 100.0;
                    for c in 0..4 {
                        k2.data_mut()[(b * 5 + j) * 4 + c] -= 3.0;
                    }
                }
            }
        }
        let out2 = scaled_dot_attention(&q, &tape.constant(k2), &tape.constant(v2), Some(&mask)).unwrap();
        assert_eq!(*out.output.value(), *out2.output.value());
    }

    #[test]
    fn fully_masked_row_outputs_zero_and_flags() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::ones(&[1, 2, 2]));
        let k = tape.constant(Tensor::ones(&[1, 2, 2]));
        let v = tape.constant(Tensor::from_f64(&[1, 2, 1], &[3.0, 5.0]).unwrap());
        let mask = Mask::new(&[1, 2, 2], vec![true, true, false, true]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.fully_masked_rows, 1);
        assert_eq!(out.output.value().data(), &[0.0, 3.0]);
        assert!(out.output.value().all_finite());
    }

    #[test]
    fn one_head_identity_projection_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::<f64>::new();
        let x = tape.constant(rand_t(&mut rng, &[2, 3, 4]));
        let y = tape.constant(rand_t(&mut rng, &[2, 5, 4]));
        let eye = || tape.constant(Tensor::eye(4));
        let p = MhaParams {
            heads: vec![HeadProjection { w_q: eye(), w_k: eye(), w_v: eye() }],
            w_o: eye(),
        };
        let mha = multi_head_attention(&p, &x, &y, &y, None).unwrap();
        let single = scaled_dot_attention(&x, &y, &y, None).unwrap();
        assert!(mha.output.value().max_abs_diff(&single.output.value()) < 1e-15);
    }

    #[test]
    fn two_heads_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, h, lq, lk) = (4, 2, 3, 2);
        let xs = rand_t(&mut rng, &[lq, d]);
        let ys = rand_t(&mut rng, &[lk, d]);
        let proj: Vec<Tensor> = (0..3 * h).map(|_| rand_t(&mut rng, &[d, d / h])).collect();
        let wo = rand_t(&mut rng, &[d, d]);

        let tape = Tape::<f64>::new();
        let p = MhaParams {
            heads: (0..h)
                .map(|i| HeadProjection {
                    w_q: tape.constant(proj[3 * i].clone()),
                    w_k: tape.constant(proj[3 * i + 1].clone()),
                    w_v: tape.constant(proj[3 * i + 2].clone()),
                })
                .collect(),
            w_o: tape.constant(wo.clone()),
        };
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let got = multi_head_attention(&p, &x, &y, &y, None).unwrap().output.value();
        assert_eq!(got.shape(), &[lq, d]);

        // explicit loops over scalars
        let mm = |a: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            (0..n)
                .map(|i| (0..m).map(|j| (0..k).map(|t| a.at(&[i, t]) * b.at(&[t, j])).sum()).collect())
                .collect()
        };
        let dh = d / h;
        let mut concat = vec![vec![0.0; d]; lq];
        for i in 0..h {
            let qh = mm(&xs, &proj[3 * i]);
            let kh = mm(&ys, &proj[3 * i + 1]);
            let vh = mm(&ys, &proj[3 * i + 2]);
            for a in 0..lq {
                let s: Vec<f64> = (0..lk)
                    .map(|b| (0..dh).map(|c| qh[a][c] * kh[b][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    concat[a][i * dh + c] = (0..lk).map(|b| e[b] / z * vh[b][c]).sum();
                }
            }
        }
        for a in 0..lq {
            for j in 0..d {
                let want: f64 = (0..d).map(|c| concat[a][c] * wo.at(&[c, j])).sum();
                assert!((got.at(&[a, j]) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mha_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ParamSet::<f64>::new();
        MhaParams::init(&mut set, "att", 4, 2, &mut rng).unwrap();
        let y = rand_t(&mut rng, &[2, 3, 4]);
        let x = rand_t(&mut rng, &[2, 2, 4]);
        let mask = Mask::from_key_validity(&[true, true, false, true, true, true], 2).unwrap();
        let err = grad_check(
            |t, x| {
                let b = set.bind(t, false);
                let p = MhaParams::bind(&b, "att", 2)?;
                let yv = t.constant(y.clone());
                Ok(multi_head_attention(&p, &x, &yv, &yv, Some(&mask))?.output.tanh().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        assert!(MhaParams::<f64>::init(&mut ParamSet::new(), "bad", 6, 4, &mut rng).is_err());
    }
}
