//! Parameterized building blocks.
//!
//! Each parameter struct borrows [`Var`]s from a [`Bound`] parameter set, so
//! a layer is "instantiated" once per tape. The matching `init` functions
//! add freshly initialized tensors to a [`ParamSet`] under a path prefix.

mod attention;
mod block;
mod gru;

pub use attention::{
    multi_head_attention, scaled_dot_attention, Attention, MhaOutput, MhaParams, MASK_FILL,
};
pub use block::{
    decoder_block, transformer_block, BlockOutput, DecoderBlockParams, DecoderBlockOutput,
    TransformerBlockParams,
};
pub use gru::{gru_encode, gru_step, GruEncoding, GruParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init_normal, init_uniform, Bound, ParamSet};
use crate::tensor::{Real, Tensor, Var};

pub(crate) fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear<'t, T: Real = f64> {
    pub weight: Var<'t, T>,
    pub bias: Option<Var<'t, T>>,
}

impl<'t, T: Real> Linear<'t, T> {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        set.insert(path(prefix, "w"), init_uniform(rng, d_in, d_out))?;
        if bias {
            set.insert(path(prefix, "b"), Tensor::zeros(&[d_out]))?;
        }
        Ok(())
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str) -> Result<Self> {
        let b = path(prefix, "b");
        Ok(Linear {
            weight: params.get(&path(prefix, "w"))?,
            bias: if params.has(&b) { Some(params.get(&b)?) } else { None },
        })
    }

    pub fn forward(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

/// Per-feature scale and shift applied after normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams<'t, T: Real = f64> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'t, T: Real> LayerNormParams<'t, T> {
    pub fn init(set: &mut ParamSet<T>, prefix: &str, d: usize) -> Result<()> {
        set.insert(path(prefix, "gamma"), Tensor::ones(&[d]))?;
        set.insert(path(prefix, "beta"), Tensor::zeros(&[d]))
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: params.get(&path(prefix, "gamma"))?,
            beta: params.get(&path(prefix, "beta"))?,
        })
    }

    pub fn forward(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&self.gamma, &self.beta, T::lit(LAYER_NORM_EPS))
    }
}

/// `[V, d]` token embedding table.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable<'t, T: Real = f64> {
    pub table: Var<'t, T>,
}

impl<'t, T: Real> EmbeddingTable<'t, T> {
    /// Normal(0, 0.02) rows.
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        vocab: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<()> {
        set.insert(path(prefix, "table"), init_normal(rng, vocab, d, 0.02))
    }

    pub fn bind(params: &Bound<'t, T>, prefix: &str) -> Result<Self> {
        Ok(EmbeddingTable {
            table: params.get(&path(prefix, "table"))?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }
}

/// Row lookup; output shape is `id_shape + [d]`.
pub fn embed_lookup<'t, T: Real>(
    table: &EmbeddingTable<'t, T>,
    ids: &[usize],
    id_shape: &[usize],
) -> Result<Var<'t, T>> {
    table.table.embedding(ids, id_shape)
}

/// Kind of fixed position signal added to a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalKind {
    Sinusoidal,
}

/// `[len, d]` table with `sin(p / 10000^(2i/d))` at even and `cos` at odd feature `2i(+1)`.
pub fn sinusoidal_table<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Adds position encodings along the second-to-last axis of `x: [.., L, d]`.
pub fn positional_encode<'t, T: Real>(x: &Var<'t, T>, kind: PositionalKind) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Contract(format!(
            "positional encoding needs [.., L, d], got {shape:?}"
        )));
    }
    let (len, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let table = match kind {
        PositionalKind::Sinusoidal => sinusoidal_table(len, d),
    };
    x.add(&x.tape().constant(table))
}

/// Inverted dropout with its own seeded stream; a no-op when disabled.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply<'t, T: Real>(&mut self, x: Var<'t, T>) -> Var<'t, T> {
        match &mut self.rng {
            Some(rng) => x.dropout(self.rate, rng),
            None => x,
        }
    }
}
