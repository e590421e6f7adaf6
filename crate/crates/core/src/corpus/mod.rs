//! Dialogue corpus ingestion and mini-batch construction.
//!
//! Corpus files hold one dialogue per line with utterances separated by the
//! literal `__eou__` marker. A dialogue of `K` utterances expands into `K - 1`
//! samples, each predicting the next utterance from the ones before it.

mod batch;
pub mod synthetic;
mod tokenize;
mod vocab;

pub use batch::{make_batches, Batch};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, SPECIALS, UNK};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UTTERANCE_SEPARATOR: &str = "__eou__";

/// Ordered utterances of one conversation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub utterances: Vec<String>,
}

impl Dialogue {
    /// Splits a `__eou__`-separated line; empty segments are dropped.
    pub fn parse(line: &str) -> Dialogue {
        Dialogue {
            utterances: line
                .split(UTTERANCE_SEPARATOR)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = String::new();
        for u in &self.utterances {
            line.push_str(u);
            line.push(' ');
            line.push_str(UTTERANCE_SEPARATOR);
            line.push(' ');
        }
        line.trim_end().to_string()
    }
}

/// Parsed corpus file.
#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Non-blank lines with fewer than two utterances.
    pub skipped: usize,
}

pub fn parse_dialogues(text: &str) -> LoadedCorpus {
    let mut out = LoadedCorpus::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let d = Dialogue::parse(line);
        if d.utterances.len() < 2 {
            out.skipped += 1;
        } else {
            out.dialogues.push(d);
        }
    }
    out
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_dialogues(&text);
    if corpus.dialogues.is_empty() {
        return Err(Error::Format(format!(
            "{}: no dialogue with at least two utterances",
            path.display()
        )));
    }
    Ok(corpus)
}

/// Reads a file with one `__eou__`-separated context per line, keeping
/// single-utterance lines (used for generation and multi-reference eval).
pub fn load_contexts(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Dialogue::parse(l).utterances)
        .collect())
}

/// Reads TAB-separated alternative references, one line per context.
pub fn load_references(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| {
            l.split('\t')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .collect())
}

/// A context (most recent utterance last) and the reply that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample<U = Vec<usize>> {
    pub context: Vec<U>,
    pub response: U,
}

/// Turns `K` utterances into `K - 1` samples; each context keeps at most the
/// `max_turns - 1` most recent utterances.
pub fn expand_samples<U: Clone>(utterances: &[U], max_turns: usize) -> Vec<Sample<U>> {
    let keep = max_turns.saturating_sub(1).max(1);
    (1..utterances.len())
        .map(|j| Sample {
            context: utterances[j.saturating_sub(keep)..j].to_vec(),
            response: utterances[j].clone(),
        })
        .collect()
}

/// Tokenizes and id-encodes every utterance of a dialogue.
pub fn encode_utterances(d: &Dialogue, vocab: &Vocab) -> Vec<Vec<usize>> {
    d.utterances
        .iter()
        .map(|u| vocab.encode(&tokenize(u)))
        .collect()
}

/// All `K - 1` id-encoded samples of every dialogue, in corpus order.
pub fn corpus_samples(dialogues: &[Dialogue], vocab: &Vocab, max_turns: usize) -> Vec<Sample> {
    dialogues
        .iter()
        .flat_map(|d| expand_samples(&encode_utterances(d, vocab), max_turns))
        .collect()
}
