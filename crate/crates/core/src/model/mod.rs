//! The hierarchical encoder and split fusion decoder.
//!
//! A word-level GRU turns each context utterance into one sentence vector
//! (`H^u`). A self-attention stack over those vectors yields context vectors
//! (`H^c`). The decoder's first part cross-attends `H^c`, its second part
//! cross-attends `H^u`, and a linear map produces vocabulary logits.

mod config;

pub use config::{DecoderMode, ModelConfig};

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::layers::{
    decoder_block, embed_lookup, gru_encode, path, positional_encode, transformer_block,
    DecoderBlockOutput, DecoderBlockParams, Dropout, EmbeddingTable, GruParams, Linear,
    PositionalKind, TransformerBlockParams,
};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Mask, Real, Tape, Tensor, Var};

pub const EMBED: &str = "embed";
pub const GRU: &str = "enc.gru";
pub const OUTPUT: &str = "out";

pub fn encoder_layer(i: usize) -> String {
    format!("enc.layer{i}")
}

pub fn intention_layer(i: usize) -> String {
    format!("dec.intention.layer{i}")
}

pub fn generation_layer(i: usize) -> String {
    format!("dec.generation.layer{i}")
}

/// Configuration plus its learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized parameters drawn from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let (d, h, ff) = (config.d_model, config.heads, config.ffn_width());
        EmbeddingTable::init(&mut set, EMBED, config.vocab_size, d, &mut rng)?;
        GruParams::init(&mut set, GRU, d, d, config.gru_bias, &mut rng)?;
        for i in 0..config.enc_layers {
            TransformerBlockParams::init(&mut set, &encoder_layer(i), d, h, ff, &mut rng)?;
        }
        for i in 0..config.dec_layers_intention {
            DecoderBlockParams::init(&mut set, &intention_layer(i), d, h, ff, &mut rng)?;
        }
        for i in 0..config.dec_layers_generation {
            DecoderBlockParams::init(&mut set, &generation_layer(i), d, h, ff, &mut rng)?;
        }
        if config.tie_embeddings {
            set.insert(path(OUTPUT, "b"), Tensor::zeros(&[config.vocab_size]))?;
        } else {
            Linear::init(&mut set, OUTPUT, d, config.vocab_size, true, &mut rng)?;
        }
        Ok(Model { config, params: set })
    }

    /// Pairs existing parameters with a configuration, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let reference = Model::<T>::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::dim("parameter shape", t.shape(), got.shape()));
            }
        }
        if params.len() != reference.params.len() {
            let extra: Vec<&str> = params
                .names()
                .filter(|n| !reference.params.contains(n))
                .collect();
            return Err(Error::Format(format!("unexpected parameters {extra:?}")));
        }
        Ok(Model { config, params })
    }

    /// Registers the parameters on `tape`. Dropout is active only when a seed is given.
    pub fn bind<'t>(
        &self,
        tape: &'t Tape<T>,
        requires_grad: bool,
        dropout_seed: Option<u64>,
    ) -> Result<BoundModel<'t, T>> {
        BoundModel::new(&self.config, self.params.bind(tape, requires_grad), dropout_seed)
    }
}

/// Sentence and context representations of a batch of contexts.
#[derive(Clone, Debug)]
pub struct EncodedContext<'t, T: Real = f64> {
    /// `[B, n-1, d]` per-turn GRU final states.
    pub sentences: Var<'t, T>,
    /// `[B, n-1, d]` utterance-encoder outputs.
    pub context: Var<'t, T>,
    /// `[B, n-1]`, `true` at real turns.
    pub turn_mask: Vec<bool>,
    /// Per encoder layer, per head `[B, n-1, n-1]` weights.
    pub weights: Vec<Vec<Var<'t, T>>>,
    /// Real turns that contained no tokens.
    pub empty_utterances: usize,
}

impl<'t, T: Real> EncodedContext<'t, T> {
    pub fn batch_size(&self) -> usize {
        self.sentences.shape()[0]
    }

    pub fn turns(&self) -> usize {
        self.sentences.shape()[1]
    }

    /// Same encoding with the context representations replaced by the sentence ones.
    pub fn with_sentences_as_context(&self) -> Self {
        EncodedContext {
            context: self.sentences,
            ..self.clone()
        }
    }

    fn key_mask(&self) -> Result<Mask> {
        Mask::from_key_validity(&self.turn_mask, self.batch_size())
    }
}

/// Output of a decoder half.
#[derive(Clone, Debug)]
pub struct StackOutput<'t, T: Real = f64> {
    pub output: Var<'t, T>,
    pub layers: Vec<DecoderBlockOutput<'t, T>>,
}

/// Logits together with every attention map computed on the way.
#[derive(Clone, Debug)]
pub struct Forward<'t, T: Real = f64> {
    /// `[B, T, V]`.
    pub logits: Var<'t, T>,
    pub intention: StackOutput<'t, T>,
    pub generation: StackOutput<'t, T>,
    pub fully_masked_rows: usize,
}

/// Parameters of a [`Model`] registered on one tape.
pub struct BoundModel<'t, T: Real = f64> {
    pub config: ModelConfig,
    pub params: Bound<'t, T>,
    embed: EmbeddingTable<'t, T>,
    gru: GruParams<'t, T>,
    encoder: Vec<TransformerBlockParams<'t, T>>,
    intention: Vec<DecoderBlockParams<'t, T>>,
    generation: Vec<DecoderBlockParams<'t, T>>,
    output: Linear<'t, T>,
    dropout: RefCell<Dropout>,
}

impl<'t, T: Real> BoundModel<'t, T> {
    pub fn new(config: &ModelConfig, params: Bound<'t, T>, dropout_seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let h = config.heads;
        let embed = EmbeddingTable::bind(&params, EMBED)?;
        if embed.vocab_size() != config.vocab_size || embed.table.shape()[1] != config.d_model {
            return Err(Error::dim(
                "embedding table",
                &[config.vocab_size, config.d_model],
                &embed.table.shape(),
            ));
        }
        let gru = GruParams::bind(&params, GRU)?;
        let encoder = (0..config.enc_layers)
            .map(|i| TransformerBlockParams::bind(&params, &encoder_layer(i), h))
            .collect::<Result<_>>()?;
        let intention = (0..config.dec_layers_intention)
            .map(|i| DecoderBlockParams::bind(&params, &intention_layer(i), h))
            .collect::<Result<_>>()?;
        let generation = (0..config.dec_layers_generation)
            .map(|i| DecoderBlockParams::bind(&params, &generation_layer(i), h))
            .collect::<Result<_>>()?;
        let output = if config.tie_embeddings {
            Linear {
                weight: embed.table.transpose()?,
                bias: Some(params.get(&path(OUTPUT, "b"))?),
            }
        } else {
            Linear::bind(&params, OUTPUT)?
        };
        let dropout = match dropout_seed {
            Some(seed) if config.dropout > 0.0 => Dropout::new(config.dropout, seed),
            _ => Dropout::disabled(),
        };
        Ok(BoundModel {
            config: config.clone(),
            params,
            embed,
            gru,
            encoder,
            intention,
            generation,
            output,
            dropout: RefCell::new(dropout),
        })
    }

    fn drop(&self, x: Var<'t, T>) -> Var<'t, T> {
        self.dropout.borrow_mut().apply(x)
    }

    fn embed_scaled(&self, ids: &[usize], shape: &[usize]) -> Result<Var<'t, T>> {
        let scale = T::lit((self.config.d_model as f64).sqrt());
        Ok(embed_lookup(&self.embed, ids, shape)?.scale(scale))
    }

    /// Runs the word-level GRU over every turn, then the utterance encoder.
    pub fn encode(&self, batch: &Batch) -> Result<EncodedContext<'t, T>> {
        let (b, n, lw) = (batch.batch_size, batch.turns, batch.word_len);
        let d = self.config.d_model;
        if batch.ctx_ids.len() != b * n * lw || batch.turn_mask.len() != b * n || batch.ctx_lengths.len() != b * n {
            return Err(Error::Contract("malformed context batch".into()));
        }
        if n + 1 > self.config.max_turns {
            return Err(Error::Contract(format!(
                "{n} context turns exceed max_turns {} - 1",
                self.config.max_turns
            )));
        }
        if let Some(row) = batch.turn_mask.chunks(n).position(|r| !r.contains(&true)) {
            return Err(Error::Contract(format!("empty context in batch row {row}")));
        }
        let words = self.embed_scaled(&batch.ctx_ids, &[b * n, lw])?;
        let words = self.drop(words);
        let gru = gru_encode(&self.gru, &words, &batch.ctx_lengths)?;
        let empty_utterances = batch
            .ctx_lengths
            .iter()
            .zip(&batch.turn_mask)
            .filter(|&(&l, &real)| real && l == 0)
            .count();
        let sentences = gru.h_final.reshape(&[b, n, d])?;

        let mut x = sentences;
        if self.config.turn_positions {
            x = positional_encode(&x, PositionalKind::Sinusoidal)?;
        }
        let mut x = self.drop(x);
        let mask = Mask::from_key_validity(&batch.turn_mask, b)?;
        let mut weights = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let out = transformer_block(layer, &x, &x, Some(&mask), &mut self.dropout.borrow_mut())?;
            x = out.output;
            weights.push(out.weights);
        }
        Ok(EncodedContext {
            sentences,
            context: x,
            turn_mask: batch.turn_mask.clone(),
            weights,
            empty_utterances,
        })
    }

    /// Scaled response embeddings plus position signal, `[B, T, d]`.
    pub fn embed_response(&self, ids: &[usize], batch: usize) -> Result<Var<'t, T>> {
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(Error::Contract(format!(
                "{} response ids do not split into {batch} rows",
                ids.len()
            )));
        }
        let t = ids.len() / batch;
        if t == 0 || t > self.config.max_sentence_len + 2 {
            return Err(Error::Contract(format!(
                "response length {t} outside 1..={}",
                self.config.max_sentence_len + 2
            )));
        }
        let mut x = self.embed_scaled(ids, &[batch, t])?;
        if self.config.token_positions {
            x = positional_encode(&x, PositionalKind::Sinusoidal)?;
        }
        Ok(self.drop(x))
    }

    fn run_stack(
        &self,
        layers: &[DecoderBlockParams<'t, T>],
        x: Var<'t, T>,
        memory: &Var<'t, T>,
        memory_mask: &Mask,
        causal: &Mask,
    ) -> Result<StackOutput<'t, T>> {
        if x.shape().len() != 3 || x.shape()[0] != memory.shape()[0] {
            return Err(Error::dim("decoder input", &x.shape(), &memory.shape()));
        }
        let t = x.shape()[1];
        if t > self.config.max_sentence_len + 2 {
            return Err(Error::Contract(format!(
                "response length {t} exceeds {}",
                self.config.max_sentence_len + 2
            )));
        }
        let mut out = StackOutput { output: x, layers: Vec::with_capacity(layers.len()) };
        for layer in layers {
            let block = decoder_block(
                layer,
                &out.output,
                memory,
                causal,
                Some(memory_mask),
                &mut self.dropout.borrow_mut(),
            )?;
            out.output = block.output;
            out.layers.push(block);
        }
        Ok(out)
    }

    fn intention_memory<'a>(&self, enc: &'a EncodedContext<'t, T>) -> &'a Var<'t, T> {
        match self.config.decoder_mode {
            DecoderMode::SentenceOnly => &enc.sentences,
            DecoderMode::XFusion | DecoderMode::ContextOnly => &enc.context,
        }
    }

    fn generation_memory<'a>(&self, enc: &'a EncodedContext<'t, T>) -> &'a Var<'t, T> {
        match self.config.decoder_mode {
            DecoderMode::ContextOnly => &enc.context,
            DecoderMode::XFusion | DecoderMode::SentenceOnly => &enc.sentences,
        }
    }

    /// First decoder part; cross-attends the context representations.
    pub fn decode_intention(
        &self,
        x_r: Var<'t, T>,
        enc: &EncodedContext<'t, T>,
        causal: &Mask,
    ) -> Result<StackOutput<'t, T>> {
        self.run_stack(&self.intention, x_r, self.intention_memory(enc), &enc.key_mask()?, causal)
    }

    /// Second decoder part; cross-attends the sentence representations.
    pub fn decode_generation(
        &self,
        o_c: Var<'t, T>,
        enc: &EncodedContext<'t, T>,
        causal: &Mask,
    ) -> Result<StackOutput<'t, T>> {
        self.run_stack(&self.generation, o_c, self.generation_memory(enc), &enc.key_mask()?, causal)
    }

    /// Teacher-forced logits for `resp_in` (`[B, T]` ids) given an encoding.
    pub fn decode(&self, enc: &EncodedContext<'t, T>, resp_in: &[usize]) -> Result<Forward<'t, T>> {
        let b = enc.batch_size();
        let x = self.embed_response(resp_in, b)?;
        let causal = Mask::causal(x.shape()[1]);
        let intention = self.decode_intention(x, enc, &causal)?;
        let generation = self.decode_generation(intention.output, enc, &causal)?;
        let logits = self.output.forward(&generation.output)?;
        let fully_masked_rows = intention
            .layers
            .iter()
            .chain(&generation.layers)
            .map(|l| l.fully_masked_rows)
            .sum();
        Ok(Forward {
            logits,
            intention,
            generation,
            fully_masked_rows,
        })
    }

    /// Encodes the context and returns teacher-forced logits.
    pub fn forward_logits(&self, batch: &Batch) -> Result<Forward<'t, T>> {
        let enc = self.encode(batch)?;
        self.decode(&enc, &batch.resp_in)
    }

    /// Mean next-token NLL of the batch's targets.
    pub fn loss(&self, batch: &Batch) -> Result<Var<'t, T>> {
        let fwd = self.forward_logits(batch)?;
        nll_loss(&fwd.logits, &batch.resp_target, &batch.resp_mask)
    }
}

/// Mean of `-log softmax(logits)[target]` over positions where `mask` is set.
pub fn nll_loss<'t, T: Real>(logits: &Var<'t, T>, targets: &[usize], mask: &[bool]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    if shape.len() < 2 || targets.len() != rows || mask.len() != rows {
        return Err(Error::dim("nll_loss", &shape, &[targets.len(), mask.len()]));
    }
    logits.softmax_nll(targets, mask)
}
