use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SPECIALS;
use crate::error::{Error, Result};

/// Which encoder output each half of the decoder cross-attends to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Intention layers read the context representations, generation layers
    /// read the per-turn sentence representations.
    #[default]
    XFusion,
    /// Every decoder layer reads the context representations.
    ContextOnly,
    /// Every decoder layer reads the sentence representations.
    SentenceOnly,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 3] = [
        DecoderMode::XFusion,
        DecoderMode::ContextOnly,
        DecoderMode::SentenceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::XFusion => "x_fusion",
            DecoderMode::ContextOnly => "context_only",
            DecoderMode::SentenceOnly => "sentence_only",
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder mode '{s}'")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers_intention: usize,
    pub dec_layers_generation: usize,
    pub vocab_size: usize,
    pub max_turns: usize,
    pub max_sentence_len: usize,
    pub decoder_mode: DecoderMode,
    pub dropout: f64,
    /// Sinusoidal turn-index signal added before the utterance encoder.
    pub turn_positions: bool,
    /// Sinusoidal position signal added to response embeddings.
    pub token_positions: bool,
    pub gru_bias: bool,
    /// Reuse the embedding table as the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            enc_layers: 2,
            dec_layers_intention: 2,
            dec_layers_generation: 2,
            vocab_size: 13500,
            max_turns: 10,
            max_sentence_len: 50,
            decoder_mode: DecoderMode::XFusion,
            dropout: 0.1,
            turn_positions: true,
            token_positions: true,
            gru_bias: false,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }

    pub fn decoder_layers(&self) -> usize {
        self.dec_layers_intention + self.dec_layers_generation
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size <= SPECIALS.len() {
            return fail(format!(
                "vocab_size {} leaves no room beyond the {} special tokens",
                self.vocab_size,
                SPECIALS.len()
            ));
        }
        if self.max_turns < 2 {
            return fail(format!("max_turns {} must be at least 2", self.max_turns));
        }
        if self.max_sentence_len == 0 {
            return fail("max_sentence_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.decoder_mode {
            DecoderMode::XFusion
                if self.dec_layers_intention != self.dec_layers_generation
                    || self.dec_layers_intention == 0 =>
            {
                fail(format!(
                    "x_fusion needs an even split of decoder layers, got {}+{}",
                    self.dec_layers_intention, self.dec_layers_generation
                ))
            }
            _ if self.decoder_layers() == 0 => fail("decoder needs at least one layer".into()),
            _ => Ok(()),
        }
    }
}
