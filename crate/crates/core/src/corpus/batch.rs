use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Padded mini-batch; all arrays are row-major and masks are `true` at real
/// (non-PAD) entries. Real turns come first within each context row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    /// Context turns per row (`n - 1`, padded).
    pub turns: usize,
    /// Tokens per context utterance (`L_w`, padded).
    pub word_len: usize,
    /// Response positions (`T`), including BOS on input and EOS on target.
    pub resp_len: usize,
    /// `[B, turns, word_len]`.
    pub ctx_ids: Vec<usize>,
    pub ctx_word_mask: Vec<bool>,
    /// `[B, turns]` token count per turn.
    pub ctx_lengths: Vec<usize>,
    /// `[B, turns]`.
    pub turn_mask: Vec<bool>,
    /// `[B, T]`.
    pub resp_in: Vec<usize>,
    pub resp_target: Vec<usize>,
    pub resp_mask: Vec<bool>,
}

impl Batch {
    /// Pads and frames `samples`; utterances keep their first
    /// `max_sentence_len` tokens and contexts their last `max_turns - 1` turns.
    pub fn collate(samples: &[Sample], max_turns: usize, max_sentence_len: usize) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Contract("cannot batch zero samples".into()));
        }
        if max_turns < 2 || max_sentence_len == 0 {
            return Err(Error::Config(format!(
                "max_turns {max_turns} must be >= 2 and max_sentence_len {max_sentence_len} positive"
            )));
        }
        let keep = max_turns - 1;
        let contexts: Vec<&[Vec<usize>]> = samples
            .iter()
            .map(|s| {
                if s.context.is_empty() {
                    Err(Error::Contract("sample with empty context".into()))
                } else {
                    Ok(&s.context[s.context.len().saturating_sub(keep)..])
                }
            })
            .collect::<Result<_>>()?;
        let b = samples.len();
        let turns = contexts.iter().map(|c| c.len()).max().unwrap_or(1);
        let word_len = contexts
            .iter()
            .flat_map(|c| c.iter().map(|u| u.len().min(max_sentence_len)))
            .max()
            .unwrap_or(0)
            .max(1);
        let resp_len = samples
            .iter()
            .map(|s| s.response.len().min(max_sentence_len) + 1)
            .max()
            .unwrap_or(1);

        let mut batch = Batch {
            batch_size: b,
            turns,
            word_len,
            resp_len,
            ctx_ids: vec![PAD; b * turns * word_len],
            ctx_word_mask: vec![false; b * turns * word_len],
            ctx_lengths: vec![0; b * turns],
            turn_mask: vec![false; b * turns],
            resp_in: vec![PAD; b * resp_len],
            resp_target: vec![PAD; b * resp_len],
            resp_mask: vec![false; b * resp_len],
        };
        for (i, (ctx, sample)) in contexts.iter().zip(samples).enumerate() {
            for (j, utt) in ctx.iter().enumerate() {
                let row = i * turns + j;
                let n = utt.len().min(max_sentence_len);
                batch.turn_mask[row] = true;
                batch.ctx_lengths[row] = n;
                let base = row * word_len;
                batch.ctx_ids[base..base + n].copy_from_slice(&utt[..n]);
                batch.ctx_word_mask[base..base + n].fill(true);
            }
            let resp = &sample.response[..sample.response.len().min(max_sentence_len)];
            let base = i * resp_len;
            batch.resp_in[base] = BOS;
            batch.resp_in[base + 1..base + 1 + resp.len()].copy_from_slice(resp);
            batch.resp_target[base..base + resp.len()].copy_from_slice(resp);
            batch.resp_target[base + resp.len()] = EOS;
            batch.resp_mask[base..base + resp.len() + 1].fill(true);
        }
        Ok(batch)
    }

    /// Rows `range` of this batch, keeping the padded dimensions.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Result<Batch> {
        if range.is_empty() || range.end > self.batch_size {
            return Err(Error::Contract(format!(
                "row range {range:?} outside batch of {}",
                self.batch_size
            )));
        }
        let ctx = self.turns * self.word_len;
        let (n, t) = (self.turns, self.resp_len);
        let (a, b) = (range.start, range.end);
        Ok(Batch {
            batch_size: b - a,
            turns: n,
            word_len: self.word_len,
            resp_len: t,
            ctx_ids: self.ctx_ids[a * ctx..b * ctx].to_vec(),
            ctx_word_mask: self.ctx_word_mask[a * ctx..b * ctx].to_vec(),
            ctx_lengths: self.ctx_lengths[a * n..b * n].to_vec(),
            turn_mask: self.turn_mask[a * n..b * n].to_vec(),
            resp_in: self.resp_in[a * t..b * t].to_vec(),
            resp_target: self.resp_target[a * t..b * t].to_vec(),
            resp_mask: self.resp_mask[a * t..b * t].to_vec(),
        })
    }

    /// Unmasked response positions.
    pub fn target_tokens(&self) -> usize {
        self.resp_mask.iter().filter(|&&m| m).count()
    }
}

/// Chunks `samples` into padded batches, shuffled by `seed` when given; the
/// final partial batch is kept.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    max_turns: usize,
    max_sentence_len: usize,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot batch zero samples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let chunk: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            Batch::collate(&chunk, max_turns, max_sentence_len)
        })
        .collect()
}
