//! Reply decoding and automatic response-quality metrics.

mod decode;
mod metrics;

pub use decode::{
    beam_decode, beam_search, decode_all, greedy_decode, greedy_decode_many, BeamResult,
    DecodeConfig, Hypothesis, ModelDecoder, StepModel, Strategy,
};
pub use metrics::{
    bleu_k, compute_metrics, corpus_bleu, distinct_k, lcs_len, rouge, rouge_l, rouge_n,
    MetricReport,
};

use crate::corpus::{encode_utterances, expand_samples, tokenize, Batch, Dialogue, Vocab, SPECIALS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tape};

/// Contexts to answer with their acceptable replies (tokenized).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TestSet {
    /// Id-encoded turns per context, most recent last.
    pub contexts: Vec<Vec<Vec<usize>>>,
    pub references: Vec<Vec<Vec<String>>>,
}

impl TestSet {
    /// Every `K - 1` expansion of each dialogue, with its true next utterance
    /// as the single reference.
    pub fn from_dialogues(dialogues: &[Dialogue], vocab: &Vocab, max_turns: usize) -> TestSet {
        let mut set = TestSet::default();
        for d in dialogues {
            let ids = encode_utterances(d, vocab);
            for (s, text) in expand_samples(&ids, max_turns).into_iter().zip(expand_samples(&d.utterances, max_turns)) {
                set.contexts.push(s.context);
                set.references.push(vec![tokenize(&text.response)]);
            }
        }
        set
    }

    /// Whole lines as contexts, paired with TAB-separated reference lines.
    pub fn from_references(
        contexts: &[Vec<String>],
        references: &[Vec<String>],
        vocab: &Vocab,
        max_turns: usize,
    ) -> Result<TestSet> {
        if contexts.len() != references.len() {
            return Err(Error::Contract(format!(
                "{} contexts but {} reference lines",
                contexts.len(),
                references.len()
            )));
        }
        let keep = max_turns.saturating_sub(1).max(1);
        let mut set = TestSet::default();
        for (i, (c, r)) in contexts.iter().zip(references).enumerate() {
            if c.is_empty() {
                return Err(Error::Format(format!("context line {} is empty", i + 1)));
            }
            let turns = &c[c.len().saturating_sub(keep)..];
            set.contexts.push(turns.iter().map(|u| vocab.encode(&tokenize(u))).collect());
            set.references.push(r.iter().map(|x| tokenize(x)).collect());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Replies decoded for a test set and their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub replies: Vec<Vec<String>>,
}

/// Reply tokens with special symbols other than `<unk>` removed.
pub fn reply_tokens(vocab: &Vocab, ids: &[usize]) -> Vec<String> {
    vocab
        .decode(ids)
        .into_iter()
        .filter(|t| !SPECIALS[..3].contains(&t.as_str()))
        .collect()
}

/// Decodes a reply for every context of `test` and scores it.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    test: &TestSet,
    cfg: &DecodeConfig,
) -> Result<Evaluation> {
    if test.contexts.len() != test.references.len() {
        return Err(Error::Contract("contexts and reference sets are not aligned".into()));
    }
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let decoder = ModelDecoder::new(model, &test.contexts)?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let replies: Vec<Vec<String>> = decode_all(&decoder, &idx, cfg)?
        .iter()
        .map(|ids| reply_tokens(vocab, ids))
        .collect();
    let report = compute_metrics(&replies, &test.references)?;
    Ok(Evaluation { report, replies })
}

/// Fraction of real target positions (reply tokens and the closing `<eos>`)
/// whose teacher-forced argmax equals the target. Ties go to the lowest id.
pub fn token_accuracy<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    let mut tape = Tape::new();
    for batch in batches {
        tape.reset();
        let bm = model.bind(&tape, false, None)?;
        let logits = bm.forward_logits(batch)?.logits.value();
        let v = *logits.shape().last().unwrap_or(&0);
        for (row, scores) in logits.data().chunks(v.max(1)).enumerate() {
            if !batch.resp_mask[row] {
                continue;
            }
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            hits += usize::from(best == batch.resp_target[row]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Contract("no target tokens to score".into()));
    }
    Ok(hits as f64 / total as f64)
}
