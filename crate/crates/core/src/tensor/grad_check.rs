use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns `max_i |g_analytic - g_numeric| / max(1, |g_analytic| + |g_numeric|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&tape, xv)?;
    if y.value().len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    y.backward()?;
    let analytic = xv.grad().expect("leaf requires grad");

    let eval = |probe: Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let v = tape.leaf(probe, false);
        Ok(f(&tape, v)?.item())
    };

    let two = T::one() + T::one();
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (two * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / T::one().max(a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    const EPS: f64 = 1e-5;

    #[test]
    fn sum_is_exact() {
        let err = grad_check(|_, x| Ok(x.sum()), &random(&[3, 4], 1), EPS).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_and_tanh() {
        let x = random(&[2, 5], 2);
        let err = grad_check(|_, x| Ok(x.sigmoid().sum()), &x, EPS).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(|_, x| Ok(x.tanh().mul(&x)?.sum()), &x, EPS).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_both_sides_and_batched() {
        let w = random(&[4, 3], 3);
        let x = random(&[2, 5, 4], 4);
        let err = grad_check(
            |t, x| Ok(x.matmul(&t.constant(w.clone()))?.tanh().sum()),
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, w| Ok(t.constant(x.clone()).matmul(&w)?.tanh().sum()),
            &w,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        // broadcast batch on the rhs
        let rhs = random(&[1, 4, 2], 5);
        let err = grad_check(
            |t, r| Ok(t.constant(x.clone()).matmul(&r)?.sigmoid().sum()),
            &rhs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, x| Ok(x.matmul(&t.constant(rhs.clone()))?.sigmoid().sum()),
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_of_sum_product_is_ones_times_transpose() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(random(&[2, 3], 6), true);
        let b = tape.leaf(random(&[3, 4], 7), false);
        a.matmul(&b).unwrap().sum().backward().unwrap();
        let expected = tape
            .constant(Tensor::ones(&[2, 4]))
            .matmul(&b.transpose().unwrap())
            .unwrap()
            .value();
        assert!(a.grad().unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn transpose_softmax_concat_narrow() {
        let x = random(&[2, 3, 4], 8);
        let c = random(&[2, 3, 4], 9);
        let err = grad_check(
            |t, x| {
                let s = x.transpose()?.softmax();
                let w = t.constant(c.clone()).transpose()?;
                Ok(s.mul(&w)?.sum())
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, x| {
                let parts = [x.narrow(2, 0, 1)?, x.narrow(2, 1, 3)?.tanh(), x];
                let cat = t.concat(&parts)?;
                Ok(cat.mul(&cat)?.narrow(1, 1, 2)?.sum())
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn broadcast_elementwise_reduces() {
        let bias = random(&[4], 10);
        let x = random(&[3, 4], 11);
        let err = grad_check(
            |t, b| {
                let xs = t.constant(x.clone());
                Ok(xs.add(&b)?.mul(&b)?.sub(&b)?.tanh().sum())
            },
            &bias,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, x| Ok(x.mul(&t.constant(bias.clone()))?.affine(0.5, 2.0).relu().sum()),
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(random(&[2, 3], 12), true);
        let mask = Mask::new(&[1, 3], vec![false, true, false]).unwrap();
        x.masked_fill(&mask, -1e9)
            .unwrap()
            .softmax()
            .mul(&tape.constant(random(&[2, 3], 13)))
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.at(&[0, 1]), 0.0);
        assert_eq!(g.at(&[1, 1]), 0.0);
        assert!(g.at(&[0, 0]) != 0.0);
    }

    #[test]
    fn layer_norm_all_inputs() {
        let x = random(&[3, 5], 14);
        let gamma = random(&[5], 15);
        let beta = random(&[5], 16);
        let w = random(&[3, 5], 17);
        let err = grad_check(
            |t, x| {
                let y = x.layer_norm(&t.constant(gamma.clone()), &t.constant(beta.clone()), 1e-5)?;
                Ok(y.mul(&t.constant(w.clone()))?.sum())
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, g| {
                let y = t.constant(x.clone()).layer_norm(&g, &t.constant(beta.clone()), 1e-5)?;
                Ok(y.mul(&t.constant(w.clone()))?.sum())
            },
            &gamma,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn embedding_scatter_adds_repeated_ids() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(random(&[5, 2], 18), true);
        let rows = table.embedding(&[3, 0, 3], &[3]).unwrap();
        assert_eq!(rows.value().data()[..2], table.value().data()[6..8]);
        let w = tape.constant(Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
        rows.mul(&w).unwrap().sum().backward().unwrap();
        let g = table.grad().unwrap();
        assert_eq!(&g.data()[6..8], &[6.0, 8.0]);
        assert_eq!(&g.data()[0..2], &[3.0, 4.0]);
        assert_eq!(&g.data()[2..4], &[0.0, 0.0]);

        let ids = [1usize, 4, 1, 2];
        let err = grad_check(
            |_, tb| Ok(tb.embedding(&ids, &[2, 2])?.tanh().sum()),
            &random(&[5, 3], 19),
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nll_softmax_matmul_chain() {
        let w = random(&[4, 6], 20);
        let x = random(&[3, 4], 21);
        let targets = [2usize, 5, 0];
        let valid = [true, false, true];
        let err = grad_check(
            |t, x| x.matmul(&t.constant(w.clone()))?.softmax_nll(&targets, &valid),
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn three_layer_composition() {
        let w1 = random(&[3, 5], 22);
        let w2 = random(&[5, 4], 23);
        let w3 = random(&[4, 2], 24);
        let err = grad_check(
            |t, x| {
                let h = x.matmul(&t.constant(w1.clone()))?.tanh();
                let h = h.matmul(&t.constant(w2.clone()))?.sigmoid();
                Ok(h.matmul(&t.constant(w3.clone()))?.softmax().mul(&h.narrow(1, 0, 2)?)?.mean())
            },
            &random(&[2, 3], 25),
            EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn square_and_reuse() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);

        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        x.add(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 2.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(random(&[6], 26), true);
        z.softmax().sum().backward().unwrap();
        for &g in z.grad().unwrap().data() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn unreached_leaf_gets_zero_and_non_scalar_loss_fails() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(random(&[2], 27), true);
        let unused = tape.leaf(random(&[3], 28), true);
        let c = tape.constant(random(&[2], 29));
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(unused.grad().unwrap(), Tensor::zeros(&[3]));
        assert!(c.grad().is_none());
        assert!(matches!(x.tanh().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_scales_and_masks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[200]), true);
        let y = x.dropout(0.5, &mut rng);
        y.sum().backward().unwrap();
        let g = x.grad().unwrap();
        for (&yv, &gv) in y.value().data().iter().zip(g.data()) {
            assert!(yv == 0.0 || yv == 2.0);
            assert_eq!(yv, gv);
        }
    }
}
