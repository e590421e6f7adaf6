use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sample, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{EncodedContext, Model};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            _ => Err(Error::Config(format!("unknown decoding strategy '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    /// Maximum reply tokens, EOS excluded.
    pub max_len: usize,
    /// Exponent `a` in `score = log p / len^a`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_width: 4,
            max_len: 50,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 || !self.length_penalty.is_finite() {
            return Err(Error::Config(
                "beam_width and max_len must be positive, length_penalty finite".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that scores the next token of a prefix given a context index.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Natural-log next-token distributions for each `(context, prefix)`;
    /// every prefix starts with BOS.
    fn next_log_probs(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>>;
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy replies for several contexts, decoded in lockstep.
pub fn greedy_decode_many<M: StepModel + ?Sized>(
    model: &M,
    contexts: &[usize],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; contexts.len()];
    let mut active: Vec<usize> = (0..contexts.len()).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[usize])> = active
            .iter()
            .map(|&i| (contexts[i], prefixes[i].as_slice()))
            .collect();
        let rows = model.next_log_probs(&queries)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, row) in active.iter().zip(&rows) {
            let next = argmax(row);
            if next != EOS {
                prefixes[i].push(next);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(prefixes.into_iter().map(|mut p| p.split_off(1)).collect())
}

/// Argmax decoding (ties to the lowest id) until EOS or `max_len` tokens.
pub fn greedy_decode<M: StepModel + ?Sized>(model: &M, context: usize, max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_many(model, &[context], max_len)?.remove(0))
}

/// A scored reply.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
}

fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Beam search result with every hypothesis retired along the way.
#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    pub retired: Vec<Hypothesis>,
}

/// Length-normalized beam search; width 1 reproduces [`greedy_decode`].
pub fn beam_search<M: StepModel + ?Sized>(model: &M, context: usize, cfg: &DecodeConfig) -> Result<BeamResult> {
    cfg.validate()?;
    let width = cfg.beam_width;
    let alpha = cfg.length_penalty;
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut retired: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if beams.is_empty() {
            break;
        }
        if alpha == 0.0 {
            let best_open = beams.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            if retired.iter().any(|h| h.score >= best_open) {
                break;
            }
        }
        let queries: Vec<(usize, &[usize])> = beams.iter().map(|(p, _)| (context, p.as_slice())).collect();
        let rows = model.next_log_probs(&queries)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, row) in rows.iter().enumerate() {
            for (v, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    candidates.push((beams[b].1 + lp, b, v));
                }
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(width);
        for &(lp, b, v) in candidates.iter().take(width) {
            let mut tokens = beams[b].0.clone();
            if v == EOS {
                tokens.remove(0);
                retired.push(Hypothesis {
                    score: length_normalized(lp, tokens.len() + 1, alpha),
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                tokens.push(v);
                next.push((tokens, lp));
            }
        }
        beams = next;
    }
    let pick = |hs: Vec<Hypothesis>| {
        hs.into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
    };
    let best = match pick(retired.clone()) {
        Some(h) => h,
        None => pick(
            beams
                .into_iter()
                .map(|(mut p, lp)| {
                    p.remove(0);
                    Hypothesis {
                        score: length_normalized(lp, p.len(), alpha),
                        tokens: p,
                        log_prob: lp,
                        finished: false,
                    }
                })
                .collect(),
        )
        .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))?,
    };
    Ok(BeamResult { best, retired })
}

pub fn beam_decode<M: StepModel + ?Sized>(model: &M, context: usize, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    Ok(beam_search(model, context, cfg)?.best.tokens)
}

/// Decodes every context with the configured strategy.
pub fn decode_all<M: StepModel + ?Sized>(model: &M, contexts: &[usize], cfg: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy_decode_many(model, contexts, cfg.max_len),
        Strategy::Beam => contexts.iter().map(|&c| beam_decode(model, c, cfg)).collect(),
    }
}

/// Cached encodings of a fixed set of contexts for repeated decoder calls.
pub struct ModelDecoder<'m, T: Real = f64> {
    model: &'m Model<T>,
    sentences: Tensor<T>,
    context: Tensor<T>,
    turn_mask: Vec<bool>,
    turns: usize,
}

const ENCODE_CHUNK: usize = 32;

impl<'m, T: Real> ModelDecoder<'m, T> {
    /// Encodes id-level contexts (most recent turn last).
    pub fn new(model: &'m Model<T>, contexts: &[Vec<Vec<usize>>]) -> Result<Self> {
        let cfg = &model.config;
        let samples: Vec<Sample> = contexts
            .iter()
            .map(|c| Sample {
                context: c.clone(),
                response: Vec::new(),
            })
            .collect();
        let batch = Batch::collate(&samples, cfg.max_turns, cfg.max_sentence_len)?;
        let (n, d) = (batch.turns, cfg.d_model);
        let mut sentences = Vec::with_capacity(contexts.len() * n * d);
        let mut context = Vec::with_capacity(contexts.len() * n * d);
        let mut tape = Tape::new();
        for start in (0..batch.batch_size).step_by(ENCODE_CHUNK) {
            tape.reset();
            let chunk = batch.rows(start..(start + ENCODE_CHUNK).min(batch.batch_size))?;
            let bm = model.bind(&tape, false, None)?;
            let enc = bm.encode(&chunk)?;
            sentences.extend_from_slice(enc.sentences.value().data());
            context.extend_from_slice(enc.context.value().data());
        }
        let shape = [batch.batch_size, n, d];
        Ok(ModelDecoder {
            model,
            sentences: Tensor::new(&shape, sentences)?,
            context: Tensor::new(&shape, context)?,
            turn_mask: batch.turn_mask,
            turns: n,
        })
    }

    pub fn len(&self) -> usize {
        self.turn_mask.len() / self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        let w = self.turns * self.model.config.d_model;
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
        }
        Tensor::new(&[rows.len(), self.turns, self.model.config.d_model], data)
    }

    fn same_length(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<usize> = queries.iter().map(|q| q.0).collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Index {
                what: "context",
                index: bad,
                size: self.len(),
            });
        }
        let t = queries[0].1.len();
        let tape = Tape::new();
        let bm = self.model.bind(&tape, false, None)?;
        let enc = EncodedContext {
            sentences: tape.constant(self.gather(&self.sentences, &rows)?),
            context: tape.constant(self.gather(&self.context, &rows)?),
            turn_mask: rows
                .iter()
                .flat_map(|&r| self.turn_mask[r * self.turns..(r + 1) * self.turns].iter().copied())
                .collect(),
            weights: Vec::new(),
            empty_utterances: 0,
        };
        let ids: Vec<usize> = queries.iter().flat_map(|q| q.1.iter().copied()).collect();
        let logits = bm.decode(&enc, &ids)?.logits.value();
        let v = self.model.config.vocab_size;
        Ok((0..queries.len())
            .map(|i| {
                let row = &logits.data()[(i * t + t - 1) * v..(i * t + t) * v];
                let row: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.into_iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

impl<T: Real> StepModel for ModelDecoder<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, q) in queries.iter().enumerate() {
            if q.1.first() != Some(&BOS) {
                return Err(Error::Contract("decoder prefix must start with BOS".into()));
            }
            groups.entry(q.1.len()).or_default().push(i);
        }
        let mut out = vec![Vec::new(); queries.len()];
        for idx in groups.values() {
            let group: Vec<(usize, &[usize])> = idx.iter().map(|&i| queries[i]).collect();
            for (&i, row) in idx.iter().zip(self.same_length(&group)?) {
                out[i] = row;
            }
        }
        Ok(out)
    }
}
