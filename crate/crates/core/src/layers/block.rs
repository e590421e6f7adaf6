//! Post-norm transformer sub-blocks.

use rand::Rng;

use super::{multi_head_attention, path, Dropout, LayerNormParams, Linear, MhaParams};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Mask, Real, Var};

/// Attention over `kv`, then a ReLU feed-forward, each wrapped as `LN(x + f(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlockParams<'t, T: Real = f64> {
    pub attention: MhaParams<'t, T>,
    pub ffn_in: Linear<'t, T>,
    pub ffn_out: Linear<'t, T>,
    pub ln_attention: LayerNormParams<'t, T>,
    pub ln_ffn: LayerNormParams<'t, T>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput<'t, T: Real = f64> {
    pub output: Var<'t, T>,
    /// Per-head attention weights.
    pub weights: Vec<Var<'t, T>>,
    pub fully_masked_rows: usize,
}

impl<'t, T: Real> TransformerBlockParams<'t, T> {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<()> {
        MhaParams::init(set, &path(prefix, "attn"), d, heads, rng)?;
        Linear::init(set, &path(prefix, "ffn_in"), d, d_ff, true, rng)?;
        Linear::init(set, &path(prefix, "ffn_out"), d_ff, d, true, rng)?;
        LayerNormParams::init(set, &path(prefix, "ln_attn"), d)?;
        LayerNormParams::init(set, &path(prefix, "ln_ffn"), d)
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(TransformerBlockParams {
            attention: MhaParams::bind(params, &path(prefix, "attn"), heads)?,
            ffn_in: Linear::bind(params, &path(prefix, "ffn_in"))?,
            ffn_out: Linear::bind(params, &path(prefix, "ffn_out"))?,
            ln_attention: LayerNormParams::bind(params, &path(prefix, "ln_attn"))?,
            ln_ffn: LayerNormParams::bind(params, &path(prefix, "ln_ffn"))?,
        })
    }
}

/// `h = LN(x + MHA(x, kv, kv))`, `out = LN(h + FFN(h))`.
pub fn transformer_block<'t, T: Real>(
    p: &TransformerBlockParams<'t, T>,
    x: &Var<'t, T>,
    kv: &Var<'t, T>,
    mask: Option<&Mask>,
    dropout: &mut Dropout,
) -> Result<BlockOutput<'t, T>> {
    let d = p.attention.width();
    if x.shape().last() != Some(&d) || kv.shape().last() != Some(&d) {
        return Err(Error::dim("transformer_block", &x.shape(), &kv.shape()));
    }
    let att = multi_head_attention(&p.attention, x, kv, kv, mask)?;
    let h = p
        .ln_attention
        .forward(&x.add(&dropout.apply(att.output))?)?;
    let ff = p.ffn_out.forward(&p.ffn_in.forward(&h)?.relu())?;
    let output = p.ln_ffn.forward(&h.add(&dropout.apply(ff))?)?;
    Ok(BlockOutput {
        output,
        weights: att.weights,
        fully_masked_rows: att.fully_masked_rows,
    })
}

/// Causal self-attention sub-block followed by a cross-attention block.
#[derive(Clone, Debug)]
pub struct DecoderBlockParams<'t, T: Real = f64> {
    pub self_attention: MhaParams<'t, T>,
    pub ln_self: LayerNormParams<'t, T>,
    pub cross: TransformerBlockParams<'t, T>,
}

#[derive(Clone, Debug)]
pub struct DecoderBlockOutput<'t, T: Real = f64> {
    pub output: Var<'t, T>,
    pub self_weights: Vec<Var<'t, T>>,
    pub cross_weights: Vec<Var<'t, T>>,
    pub fully_masked_rows: usize,
}

impl<'t, T: Real> DecoderBlockParams<'t, T> {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<()> {
        MhaParams::init(set, &path(prefix, "self_attn"), d, heads, rng)?;
        LayerNormParams::init(set, &path(prefix, "ln_self"), d)?;
        TransformerBlockParams::init(set, &path(prefix, "cross"), d, heads, d_ff, rng)
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(DecoderBlockParams {
            self_attention: MhaParams::bind(params, &path(prefix, "self_attn"), heads)?,
            ln_self: LayerNormParams::bind(params, &path(prefix, "ln_self"))?,
            cross: TransformerBlockParams::bind(params, &path(prefix, "cross"), heads)?,
        })
    }
}

/// Decoder layer: `LN(x + SelfAttn(x, causal))`, then [`transformer_block`] against `memory`.
pub fn decoder_block<'t, T: Real>(
    p: &DecoderBlockParams<'t, T>,
    x: &Var<'t, T>,
    memory: &Var<'t, T>,
    causal: &Mask,
    memory_mask: Option<&Mask>,
    dropout: &mut Dropout,
) -> Result<DecoderBlockOutput<'t, T>> {
    let sa = multi_head_attention(&p.self_attention, x, x, x, Some(causal))?;
    let h = p.ln_self.forward(&x.add(&dropout.apply(sa.output))?)?;
    let cross = transformer_block(&p.cross, &h, memory, memory_mask, dropout)?;
    Ok(DecoderBlockOutput {
        output: cross.output,
        self_weights: sa.weights,
        cross_weights: cross.weights,
        fully_masked_rows: sa.fully_masked_rows.max(cross.fully_masked_rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_normal;
    use crate::tensor::{grad_check, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamSet<f64>, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        TransformerBlockParams::init(&mut set, "blk", 4, 2, 8, &mut rng).unwrap();
        DecoderBlockParams::init(&mut set, "dec", 4, 2, 8, &mut rng).unwrap();
        let x = init_normal(&mut rng, 6, 4, 1.0).reshape(&[2, 3, 4]).unwrap();
        let kv = init_normal(&mut rng, 4, 4, 1.0).reshape(&[2, 2, 4]).unwrap();
        (set, x, kv)
    }

    #[test]
    fn residual_only_path_is_double_layer_norm() {
        let (mut set, x, kv) = setup(1);
        for name in ["blk.ffn_in.w", "blk.ffn_out.w", "blk.ffn_out.b", "blk.attn.head0.w_v", "blk.attn.head1.w_v"] {
            for v in set.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::new();
        let b = set.bind(&tape, false);
        let p = TransformerBlockParams::bind(&b, "blk", 2).unwrap();
        let xv = tape.constant(x);
        let out = transformer_block(&p, &xv, &tape.constant(kv), None, &mut Dropout::disabled()).unwrap();
        assert_eq!(out.output.shape(), vec![2, 3, 4]);
        let ln = p.ln_attention.forward(&xv).unwrap();
        let ln2 = p.ln_ffn.forward(&ln).unwrap();
        assert!(out.output.value().max_abs_diff(&ln2.value()) < 1e-14);
    }

    #[test]
    fn block_gradients() {
        let (set, x, kv) = setup(2);
        let mask = Mask::from_key_validity(&[true, false, true, true], 2).unwrap();
        let err = grad_check(
            |t, x| {
                let b = set.bind(t, false);
                let p = TransformerBlockParams::bind(&b, "blk", 2)?;
                let kv = t.constant(kv.clone());
                let out = transformer_block(&p, &x, &kv, Some(&mask), &mut Dropout::disabled())?;
                Ok(out.output.tanh().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let err = grad_check(
            |t, kv| {
                let b = set.bind(t, false);
                let p = DecoderBlockParams::bind(&b, "dec", 2)?;
                let xv = t.constant(x.clone());
                let out = decoder_block(&p, &xv, &kv, &Mask::causal(3), Some(&mask), &mut Dropout::disabled())?;
                Ok(out.output.sigmoid().sum())
            },
            &kv,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn decoder_block_is_causal() {
        let (set, x, kv) = setup(3);
        let tape = Tape::new();
        let b = set.bind(&tape, false);
        let p = DecoderBlockParams::bind(&b, "dec", 2).unwrap();
        let mem = tape.constant(kv);
        let run = |x: Tensor| {
            decoder_block(&p, &tape.constant(x), &mem, &Mask::causal(3), None, &mut Dropout::disabled())
                .unwrap()
        };
        let base = run(x.clone());
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[8..12] {
            *v += 5.0; // batch 0, position 2
        }
        let moved = run(x2).output.value();
        let base_v = base.output.value();
        for pos in 0..2 {
            for c in 0..4 {
                assert_eq!(base_v.at(&[0, pos, c]), moved.at(&[0, pos, c]));
            }
        }
        for w in &base.self_weights {
            let w = w.value();
            assert!(w.at(&[0, 0, 1]) < 1e-6 && w.at(&[1, 1, 2]) < 1e-6);
        }
    }
}
