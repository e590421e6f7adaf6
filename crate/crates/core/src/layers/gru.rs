//! Gated recurrent unit without bias terms by default:
//!
//! ```text
//! z_t = σ(x_t W_z + h_{t-1} U_z)
//! r_t = σ(x_t W_r + h_{t-1} U_r)
//! h̄_t = tanh(x_t W + (r_t ⊙ h_{t-1}) U)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ h̄_t
//! ```

use rand::Rng;

use super::path;
use crate::error::{Error, Result};
use crate::params::{init_uniform, Bound, ParamSet};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GruParams<'t, T: Real = f64> {
    pub w_z: Var<'t, T>,
    pub w_r: Var<'t, T>,
    pub w: Var<'t, T>,
    pub u_z: Var<'t, T>,
    pub u_r: Var<'t, T>,
    pub u: Var<'t, T>,
    pub b_z: Option<Var<'t, T>>,
    pub b_r: Option<Var<'t, T>>,
    pub b: Option<Var<'t, T>>,
}

const INPUT: [&str; 3] = ["w_z", "w_r", "w"];
const RECURRENT: [&str; 3] = ["u_z", "u_r", "u"];
const BIAS: [&str; 3] = ["b_z", "b_r", "b"];

/// Result of running the GRU over padded sequences.
#[derive(Clone, Copy, Debug)]
pub struct GruEncoding<'t, T: Real = f64> {
    /// `[B, d]` state at each row's last real step.
    pub h_final: Var<'t, T>,
    /// Rows whose length was zero; their output is the zero initial state.
    pub empty_sequences: usize,
}

impl<'t, T: Real> GruParams<'t, T> {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d_in: usize,
        d: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        for name in INPUT {
            set.insert(path(prefix, name), init_uniform(rng, d_in, d))?;
        }
        for name in RECURRENT {
            set.insert(path(prefix, name), init_uniform(rng, d, d))?;
        }
        if bias {
            for name in BIAS {
                set.insert(path(prefix, name), Tensor::zeros(&[d]))?;
            }
        }
        Ok(())
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str) -> Result<Self> {
        let get = |n: &str| params.get(&path(prefix, n));
        let opt = |n: &str| {
            let p = path(prefix, n);
            params.has(&p).then(|| params.get(&p)).transpose()
        };
        let p = GruParams {
            w_z: get("w_z")?,
            w_r: get("w_r")?,
            w: get("w")?,
            u_z: get("u_z")?,
            u_r: get("u_r")?,
            u: get("u")?,
            b_z: opt("b_z")?,
            b_r: opt("b_r")?,
            b: opt("b")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let (d_in, d) = (self.input(), self.hidden());
        for w in [self.w_z, self.w_r, self.w] {
            if w.shape() != [d_in, d] {
                return Err(Error::dim("gru input weights", &w.shape(), &[d_in, d]));
            }
        }
        for u in [self.u_z, self.u_r, self.u] {
            if u.shape() != [d, d] {
                return Err(Error::dim("gru recurrent weights", &u.shape(), &[d, d]));
            }
        }
        Ok(())
    }

    fn with_bias(&self, x: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        match b {
            Some(b) => x.add(&b),
            None => Ok(x),
        }
    }

    /// One step given the already-projected inputs `x·W_z`, `x·W_r`, `x·W`.
    fn step_projected(
        &self,
        xz: Var<'t, T>,
        xr: Var<'t, T>,
        xh: Var<'t, T>,
        h_prev: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let z = self
            .with_bias(xz.add(&h_prev.matmul(&self.u_z)?)?, self.b_z)?
            .sigmoid();
        let r = self
            .with_bias(xr.add(&h_prev.matmul(&self.u_r)?)?, self.b_r)?
            .sigmoid();
        let h_bar = self
            .with_bias(xh.add(&r.mul(&h_prev)?.matmul(&self.u)?)?, self.b)?
            .tanh();
        z.one_minus().mul(&h_prev)?.add(&z.mul(&h_bar)?)
    }
}

/// One recurrence step: `x_t: [B, d_in]`, `h_prev: [B, d]` → `[B, d]`.
pub fn gru_step<'t, T: Real>(
    p: &GruParams<'t, T>,
    x_t: &Var<'t, T>,
    h_prev: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (xs, hs) = (x_t.shape(), h_prev.shape());
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != p.input() || hs[1] != p.hidden() {
        return Err(Error::dim("gru_step", &xs, &hs));
    }
    p.step_projected(
        x_t.matmul(&p.w_z)?,
        x_t.matmul(&p.w_r)?,
        x_t.matmul(&p.w)?,
        *h_prev,
    )
}

/// Runs the GRU from a zero state over `xs: [B, L, d_in]` and returns the state
/// at each row's final real step. Steps at or after `lengths[b]` leave row `b`
/// untouched.
pub fn gru_encode<'t, T: Real>(
    p: &GruParams<'t, T>,
    xs: &Var<'t, T>,
    lengths: &[usize],
) -> Result<GruEncoding<'t, T>> {
    let shape = xs.shape();
    if shape.len() != 3 || shape[2] != p.input() {
        return Err(Error::dim("gru_encode", &shape, &[0, 0, p.input()]));
    }
    let (batch, len, d) = (shape[0], shape[1], p.hidden());
    if lengths.len() != batch {
        return Err(Error::Contract(format!(
            "gru_encode: {} lengths for batch of {batch}",
            lengths.len()
        )));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l > len) {
        return Err(Error::Contract(format!(
            "gru_encode: length {bad} exceeds padded length {len}"
        )));
    }
    let tape = xs.tape();
    let mut h = tape.constant(Tensor::zeros(&[batch, d]));
    let empty_sequences = lengths.iter().filter(|&&l| l == 0).count();
    let steps = lengths.iter().copied().max().unwrap_or(0);
    if steps == 0 {
        return Ok(GruEncoding {
            h_final: h,
            empty_sequences,
        });
    }

    let xz = xs.matmul(&p.w_z)?;
    let xr = xs.matmul(&p.w_r)?;
    let xh = xs.matmul(&p.w)?;
    let at = |v: &Var<'t, T>, t: usize| v.narrow(1, t, 1)?.reshape(&[batch, d]);

    for t in 0..steps {
        let next = p.step_projected(at(&xz, t)?, at(&xr, t)?, at(&xh, t)?, h)?;
        h = if lengths.iter().all(|&l| l > t) {
            next
        } else {
            let keep: Vec<T> = lengths
                .iter()
                .map(|&l| if l > t { T::one() } else { T::zero() })
                .collect();
            let m = tape.constant(Tensor::from_parts(vec![batch, 1], keep));
            h.add(&m.mul(&next.sub(&h)?)?)?
        };
    }
    Ok(GruEncoding {
        h_final: h,
        empty_sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_normal;
    use crate::tensor::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_params<'t>(tape: &'t Tape, d_in: usize, d: usize, vals: [f64; 6]) -> GruParams<'t> {
        let m = |r, c, v| tape.constant(Tensor::full(&[r, c], v));
        GruParams {
            w_z: m(d_in, d, vals[0]),
            u_z: m(d, d, vals[1]),
            w_r: m(d_in, d, vals[2]),
            u_r: m(d, d, vals[3]),
            w: m(d_in, d, vals[4]),
            u: m(d, d, vals[5]),
            b_z: None,
            b_r: None,
            b: None,
        }
    }

    fn random_params<'t>(tape: &'t Tape, d_in: usize, d: usize, seed: u64) -> GruParams<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| tape.constant(init_normal(&mut rng, r, c, 0.7));
        GruParams {
            w_z: m(d_in, d),
            w_r: m(d_in, d),
            w: m(d_in, d),
            u_z: m(d, d),
            u_r: m(d, d),
            u: m(d, d),
            b_z: None,
            b_r: None,
            b: None,
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar reference recurrence for d_in = d = 1.
    fn scalar_step(p: [f64; 6], x: f64, h: f64) -> f64 {
        let [wz, uz, wr, ur, w, u] = p;
        let z = sigmoid(wz * x + uz * h);
        let r = sigmoid(wr * x + ur * h);
        let hb = (w * x + u * (r * h)).tanh();
        (1.0 - z) * h + z * hb
    }

    #[test]
    fn zero_params_halve_hidden_state() {
        let tape = Tape::new();
        let p = constant_params(&tape, 3, 4, [0.0; 6]);
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[5.0, -2.0, 9.0]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[1, 4], &[1.0, -3.0, 0.25, 7.5]).unwrap());
        let out = gru_step(&p, &x, &h).unwrap().value();
        assert_eq!(out.data(), &[0.5, -1.5, 0.125, 3.75]);

        let zero_h = tape.constant(Tensor::zeros(&[1, 4]));
        let out = gru_step(&p, &x, &zero_h).unwrap().value();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn scalar_case_matches_hand_formula() {
        let vals = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let tape = Tape::new();
        let p = constant_params(&tape, 1, 1, vals);
        let one = tape.constant(Tensor::ones(&[1, 1]));
        let out = gru_step(&p, &one, &one).unwrap().item();
        let expected = (1.0 - sigmoid(1.0)) + sigmoid(1.0) * 1.5f64.tanh();
        assert!((out - expected).abs() < 1e-15, "{out} vs {expected}");
        assert!((out - scalar_step(vals, 1.0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn encode_three_steps_matches_scalar_chain() {
        let vals = [0.3, -0.7, 1.1, 0.4, -0.9, 0.6];
        let xs = [0.5, -1.25, 2.0];
        let tape = Tape::new();
        let p = constant_params(&tape, 1, 1, vals);
        let x = tape.constant(Tensor::from_f64(&[1, 3, 1], &xs).unwrap());
        let out = gru_encode(&p, &x, &[3]).unwrap().h_final.item();
        let expected = xs.iter().fold(0.0, |h, &x| scalar_step(vals, x, h));
        assert!((out - expected).abs() < 1e-14, "{out} vs {expected}");
    }

    #[test]
    fn single_step_encode_equals_step_from_zero() {
        let tape = Tape::new();
        let p = random_params(&tape, 3, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor = init_normal(&mut rng, 2, 3, 1.0);
        let xs = tape.constant(x.reshape(&[2, 1, 3]).unwrap());
        let enc = gru_encode(&p, &xs, &[1, 1]).unwrap().h_final.value();
        let step = gru_step(&p, &tape.constant(x), &tape.constant(Tensor::zeros(&[2, 5])))
            .unwrap()
            .value();
        assert!(enc.max_abs_diff(&step) < 1e-14);
    }

    #[test]
    fn trailing_padding_never_changes_output() {
        let tape = Tape::new();
        let p = random_params(&tape, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let content: Tensor = init_normal(&mut rng, 2, 2, 1.0);
        let mut a = vec![0.0; 2 * 5 * 2];
        a[..4].copy_from_slice(content.data());
        let mut b = a.clone();
        // row 0: length 2 with zero padding; row 1: same content, junk padding
        a[10..14].copy_from_slice(content.data());
        b[10..14].copy_from_slice(content.data());
        for v in &mut b[14..] {
            *v = 42.0;
        }
        let xs_a = tape.constant(Tensor::new(&[2, 5, 2], a).unwrap());
        let xs_b = tape.constant(Tensor::new(&[2, 5, 2], b).unwrap());
        let ha = gru_encode(&p, &xs_a, &[2, 2]).unwrap().h_final.value();
        let hb = gru_encode(&p, &xs_b, &[2, 2]).unwrap().h_final.value();
        assert_eq!(ha, hb);
        assert_eq!(ha.data()[..3], ha.data()[3..]);
    }

    #[test]
    fn zero_length_yields_zero_state_and_flag() {
        let tape = Tape::new();
        let p = random_params(&tape, 2, 3, 5);
        let xs = tape.constant(Tensor::ones(&[2, 3, 2]));
        let enc = gru_encode(&p, &xs, &[0, 3]).unwrap();
        assert_eq!(enc.empty_sequences, 1);
        assert_eq!(&enc.h_final.value().data()[..3], &[0.0; 3]);
        assert!(gru_encode(&p, &xs, &[4, 3]).is_err());
    }

    #[test]
    fn bptt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let init: Tensor = init_normal(&mut rng, 3, 4, 0.8);
        let recurrent: Tensor = init_normal(&mut rng, 4, 4, 0.8);
        let x: Tensor = init_normal(&mut rng, 2 * 4, 3, 1.0);
        let x = x.reshape(&[2, 4, 3]).unwrap();
        // gradient with respect to U (recurrent candidate weights)
        let err = grad_check(
            |t, u| {
                let mut p = random_params(t, 3, 4, 7);
                p.u = u;
                p.w_z = t.constant(init.clone());
                let enc = gru_encode(&p, &t.constant(x.clone()), &[4, 2])?;
                Ok(enc.h_final.tanh().sum())
            },
            &recurrent,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // gradient with respect to the inputs
        let err = grad_check(
            |t, xs| {
                let p = random_params(t, 3, 4, 8);
                Ok(gru_encode(&p, &xs, &[3, 4])?.h_final.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
