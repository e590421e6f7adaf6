//! Browser bindings: a metrics explorer, an in-page echo model and its
//! attention maps. Every export returns a JSON string; failures come back as
//! `{"error": "..."}`.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use xrecosa::corpus::synthetic::{split_held_out, EchoTask};
use xrecosa::corpus::{
    build_vocab, encode_utterances, make_batches, tokenize, Batch, Dialogue, Sample, Vocab,
};
use xrecosa::eval::{compute_metrics, greedy_decode, reply_tokens, token_accuracy, ModelDecoder};
use xrecosa::model::{DecoderMode, ModelConfig};
use xrecosa::tensor::{Tape, Tensor};
use xrecosa::trainer::{TrainConfig, Trainer};
use xrecosa::{Error, Result};

fn to_json<S: Serialize>(r: Result<S>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
struct MetricsView {
    scores: Vec<(String, f64)>,
    samples: usize,
    tokens: usize,
    skipped_references: usize,
}

/// Scores one reply per line of `candidates` against the TAB-separated
/// references on the same line of `references`.
#[wasm_bindgen]
pub fn metrics(candidates: &str, references: &str) -> String {
    let cands: Vec<Vec<String>> = candidates.lines().map(tokenize).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .lines()
        .map(|l| l.split('\t').map(tokenize).filter(|r| !r.is_empty()).collect())
        .collect();
    to_json(compute_metrics(&cands, &refs).map(|r| MetricsView {
        scores: r.scores().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        samples: r.samples,
        tokens: r.tokens,
        skipped_references: r.skipped_references,
    }))
}

/// Rows of a head-averaged `[1, rows, cols]` attention map.
fn mean_heads(heads: &[Tensor]) -> Vec<Vec<f64>> {
    let s = heads[0].shape();
    let (rows, cols) = (s[1], s[2]);
    (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| heads.iter().map(|h| h.at(&[0, r, c])).sum::<f64>() / heads.len() as f64)
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct TrainView {
    step: usize,
    epoch: usize,
    loss: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct ReplyView {
    turns: Vec<String>,
    reply: Vec<String>,
    /// Decoder input positions: `<bos>` then the reply tokens.
    positions: Vec<String>,
    /// Turn-to-turn weights of the last utterance-encoder layer.
    encoder: Vec<Vec<f64>>,
    /// Position-to-turn weights of the last intention layer (context memory).
    intention: Vec<Vec<f64>>,
    /// Position-to-turn weights of the last generation layer (sentence memory).
    generation: Vec<Vec<f64>>,
}

const MAX_LEN: usize = 10;

/// A small model learning to repeat the marker token hidden in its context.
#[wasm_bindgen]
pub struct EchoDemo {
    task: EchoTask,
    trainer: Trainer,
    train: Vec<Sample>,
    test: Vec<Batch>,
    batches: Vec<Batch>,
    epoch: usize,
    seed: u64,
}

fn final_turn_samples(dialogues: &[Dialogue], vocab: &Vocab) -> Vec<Sample> {
    dialogues
        .iter()
        .map(|d| {
            let mut u = encode_utterances(d, vocab);
            let response = u.pop().unwrap_or_default();
            Sample { context: u, response }
        })
        .collect()
}

impl EchoDemo {
    fn build(seed: u64, mode: &str) -> Result<EchoDemo> {
        let task = EchoTask { markers: 16, ..Default::default() };
        let (train, test) = split_held_out(task.dialogues(640, seed), 64, seed);
        let vocab = build_vocab(&train, 1000);
        let model = ModelConfig {
            d_model: 24,
            heads: 2,
            enc_layers: 1,
            dec_layers_intention: 1,
            dec_layers_generation: 1,
            vocab_size: vocab.len(),
            max_turns: task.context_turns + 1,
            max_sentence_len: MAX_LEN,
            decoder_mode: mode.parse::<DecoderMode>()?,
            dropout: 0.0,
            ..Default::default()
        };
        let config = TrainConfig { batch_size: 32, lr: 3e-3, seed, ..Default::default() };
        let train = final_turn_samples(&train, &vocab);
        let test = make_batches(&final_turn_samples(&test, &vocab), 64, model.max_turns, MAX_LEN, None)?;
        let trainer = Trainer::init(model, vocab, config)?;
        let batches = trainer.epoch_batches(&train, 0)?;
        Ok(EchoDemo { task, trainer, train, test, batches, epoch: 0, seed })
    }

    fn run_steps(&mut self, steps: usize) -> Result<TrainView> {
        let per_epoch = self.batches.len();
        let mut loss = f64::NAN;
        for _ in 0..steps {
            let epoch = self.trainer.step / per_epoch;
            if epoch != self.epoch {
                self.batches = self.trainer.epoch_batches(&self.train, epoch)?;
                self.epoch = epoch;
            }
            let batch = &self.batches[self.trainer.step % per_epoch];
            loss = self.trainer.train_step(&batch.clone())?.loss;
        }
        Ok(TrainView {
            step: self.trainer.step,
            epoch: self.epoch,
            loss,
            accuracy: token_accuracy(&self.trainer.model, &self.test)?,
        })
    }

    fn answer(&self, context: &str) -> Result<ReplyView> {
        let d = Dialogue::parse(context);
        let keep = self.task.context_turns;
        let turns = d.utterances[d.utterances.len().saturating_sub(keep)..].to_vec();
        if turns.is_empty() {
            return Err(Error::Contract("context has no utterances".into()));
        }
        let vocab = &self.trainer.vocab;
        let ids: Vec<Vec<usize>> = turns.iter().map(|u| vocab.encode(&tokenize(u))).collect();
        let model = &self.trainer.model;
        let decoder = ModelDecoder::new(model, std::slice::from_ref(&ids))?;
        let reply_ids: Vec<usize> = greedy_decode(&decoder, 0, MAX_LEN)?;

        let batch = Batch::collate(&[Sample { context: ids, response: reply_ids.clone() }], model.config.max_turns, MAX_LEN)?;
        let tape = Tape::new();
        let bm = model.bind(&tape, false, None)?;
        let enc = bm.encode(&batch)?;
        let fwd = bm.decode(&enc, &batch.resp_in)?;
        let values = |ws: &[xrecosa::tensor::Var<'_>]| ws.iter().map(|w| (*w.value()).clone()).collect::<Vec<_>>();
        let cross = |layers: &[xrecosa::layers::DecoderBlockOutput<'_>]| {
            layers.last().map(|l| mean_heads(&values(&l.cross_weights))).unwrap_or_default()
        };
        let mut positions = vec!["<bos>".to_string()];
        positions.extend(vocab.decode(&reply_ids));
        positions.truncate(batch.resp_len);
        Ok(ReplyView {
            turns,
            reply: reply_tokens(vocab, &reply_ids),
            positions,
            encoder: enc.weights.last().map(|l| mean_heads(&values(l))).unwrap_or_default(),
            intention: cross(&fwd.intention.layers),
            generation: cross(&fwd.generation.layers),
        })
    }
}

#[wasm_bindgen]
impl EchoDemo {
    /// `mode` is `x_fusion`, `context_only` or `sentence_only`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, mode: &str) -> Result<EchoDemo, String> {
        EchoDemo::build(u64::from(seed), mode).map_err(|e| e.to_string())
    }

    /// Runs `steps` optimizer steps; returns step, epoch, last loss and held-out accuracy.
    pub fn train(&mut self, steps: u32) -> String {
        to_json(self.run_steps(steps as usize))
    }

    /// A fresh context in `__eou__` format.
    pub fn example(&self, index: u32) -> String {
        let d = self.task.dialogues(1, self.seed ^ ((u64::from(index) + 1) << 20));
        let mut turns = d[0].utterances.clone();
        turns.pop();
        Dialogue { utterances: turns }.to_line()
    }

    /// Greedy reply plus head-averaged attention maps for the given context.
    pub fn reply(&self, context: &str) -> String {
        to_json(self.answer(context))
    }
}
