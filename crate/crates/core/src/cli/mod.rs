//! Command-line front end: `train`, `eval`, `generate` and `chat`.

mod config;

pub use config::{Paths, RunConfig};

use std::collections::VecDeque;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    build_vocab, corpus_samples, detokenize, load_contexts, load_dialogues, load_references,
    tokenize, Dialogue, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{decode_all, evaluate_model, reply_tokens, ModelDecoder, Strategy, TestSet};
use crate::model::{DecoderMode, Model};
use crate::tensor::{Dtype, Real};
use crate::trainer::{load_checkpoint, Checkpoint, Trainer, BEST_DIR, LAST_DIR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "xrecosa", version, about = "Multi-turn dialogue response generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Build or load a vocabulary and train a model.
    Train(TrainArgs),
    /// Decode a test set and report BLEU, ROUGE and Distinct scores.
    Eval(EvalArgs),
    /// Write one reply per context line.
    Generate(GenerateArgs),
    /// Interactive conversation; `/reset`, `/context` and `/quit` are commands.
    Chat(ChatArgs),
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration with [model], [train], [decode] and [paths] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed [config default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory (a root with last/ and best/, or a checkpoint itself).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Decoder variant: x_fusion, context_only or sentence_only [config default: x_fusion].
    #[arg(long)]
    pub decoder_mode: Option<DecoderMode>,
    /// Beam width; values above 1 switch to beam search [config default: 4 with greedy decoding].
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Floating point precision: f32 or f64 [config default: f64].
    #[arg(long)]
    pub precision: Option<Dtype>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training corpus, one `__eou__`-separated dialogue per line.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development corpus used for checkpoint selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file; loaded if present, otherwise built and written there.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Hidden width [config default: 512].
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads [config default: 8].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Utterance-encoder layers [config default: 2].
    #[arg(long)]
    pub enc_layers: Option<usize>,
    /// Decoder layers reading context representations [config default: 2].
    #[arg(long)]
    pub dec_layers_intention: Option<usize>,
    /// Decoder layers reading sentence representations [config default: 2].
    #[arg(long)]
    pub dec_layers_generation: Option<usize>,
    /// Maximum vocabulary size including specials [config default: 13500].
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Dialogue turns including the reply [config default: 10].
    #[arg(long)]
    pub max_turns: Option<usize>,
    /// Tokens kept per utterance [config default: 50].
    #[arg(long)]
    pub max_sentence_len: Option<usize>,
    /// Dropout rate [config default: 0.1].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Passes over the training samples [config default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per batch [config default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// AdamW learning rate [config default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay [config default: 0.01].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient norm bound, 0 disables [config default: 1.0].
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Linear warmup steps [config default: 0].
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Stop after this many optimizer steps [config default: none].
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from `<checkpoint>/last` if it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Test file: dialogues, or contexts when --refs is given.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// TAB-separated references, one line per test context.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Vocabulary that must match the checkpoint's.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Where replies.txt and report.txt are written [default: the checkpoint directory].
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Contexts, one `__eou__`-separated line each.
    #[arg(long)]
    pub contexts: PathBuf,
    /// Reply file [default: standard output].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, S>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Chat(a) => cmd_chat(&a, input, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(c) = &common.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(m) = common.decoder_mode {
        cfg.model.decoder_mode = m;
    }
    if let Some(w) = common.beam_width {
        cfg.decode.beam_width = w;
        cfg.decode.strategy = if w > 1 { Strategy::Beam } else { Strategy::Greedy };
    }
    if let Some(p) = common.precision {
        cfg.train.precision = p;
    }
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Config file merged with train flags.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    let m = &mut cfg.model;
    set(&mut m.d_model, a.d_model);
    set(&mut m.heads, a.heads);
    set(&mut m.enc_layers, a.enc_layers);
    set(&mut m.dec_layers_intention, a.dec_layers_intention);
    set(&mut m.dec_layers_generation, a.dec_layers_generation);
    set(&mut m.vocab_size, a.vocab_size);
    set(&mut m.max_turns, a.max_turns);
    set(&mut m.max_sentence_len, a.max_sentence_len);
    set(&mut m.dropout, a.dropout);
    let t = &mut cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.grad_clip_norm, a.grad_clip);
    set(&mut t.warmup_steps, a.warmup_steps);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    for (slot, v) in [
        (&mut cfg.paths.train, &a.train),
        (&mut cfg.paths.dev, &a.dev),
        (&mut cfg.paths.vocab, &a.vocab),
    ] {
        if v.is_some() {
            slot.clone_from(v);
        }
    }
    cfg.train.checkpoint_dir.clone_from(&cfg.paths.checkpoint);
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or [paths] entry)")))
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = train_config(a)?;
    match cfg.train.precision {
        Dtype::F64 => train_with::<f64>(&cfg, a.resume, out),
        Dtype::F32 => train_with::<f32>(&cfg, a.resume, out),
    }
}

fn log(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn train_with<T: Real>(cfg: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    cfg.train.validate()?;
    let train = load_dialogues(required(&cfg.paths.train, "training corpus")?)?;
    let dev = match &cfg.paths.dev {
        Some(p) => load_dialogues(p)?.dialogues,
        None => Vec::new(),
    };
    let last = cfg.paths.checkpoint.as_ref().map(|c| c.join(LAST_DIR));
    let mut trainer = match &last {
        Some(dir) if resume && dir.join(crate::trainer::MANIFEST_FILE).exists() => {
            let ck = load_checkpoint::<T>(dir)?;
            log(out, &format!("event=resume step={} from={}", ck.manifest.step, dir.display()))?;
            Trainer::resume(ck, cfg.train.clone())?
        }
        _ => {
            let vocab = match &cfg.paths.vocab {
                Some(p) if p.exists() => Vocab::load(p)?,
                other => {
                    let v = build_vocab(&train.dialogues, cfg.model.vocab_size);
                    if let Some(p) = other {
                        v.save(p)?;
                    }
                    v
                }
            };
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = vocab.len();
            Trainer::init(model_cfg, vocab, cfg.train.clone())?
        }
    };
    let max_turns = trainer.model.config.max_turns;
    let train_samples = corpus_samples(&train.dialogues, &trainer.vocab, max_turns);
    let dev_samples = corpus_samples(&dev, &trainer.vocab, max_turns);
    log(
        out,
        &format!(
            "event=start dialogues={} skipped={} samples={} dev_samples={} vocab={} params={} mode={} precision={}",
            train.dialogues.len(),
            train.skipped,
            train_samples.len(),
            dev_samples.len(),
            trainer.vocab.len(),
            trainer.model.params.numel(),
            trainer.model.config.decoder_mode,
            T::DTYPE,
        ),
    )?;
    let history = trainer.fit(&train_samples, &dev_samples, &mut |s| {
        let _ = writeln!(out, "{}", s.log_line());
        let _ = out.flush();
    })?;
    let final_train = history.last().map_or(f64::NAN, |h| h.train_nll);
    let final_dev = history
        .iter()
        .rev()
        .find_map(|h| h.dev_nll)
        .map_or("na".to_string(), |d| format!("{d:.6}"));
    log(
        out,
        &format!(
            "event=done step={} train_nll={final_train:.6} dev_nll={final_dev} seconds={:.1}",
            trainer.step,
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Resolves a checkpoint root to a loadable directory (`best/`, then `last/`, then itself).
pub fn resolve_checkpoint(root: &Path) -> PathBuf {
    for sub in [BEST_DIR, LAST_DIR] {
        let d = root.join(sub);
        if d.join(crate::trainer::MANIFEST_FILE).exists() {
            return d;
        }
    }
    root.to_path_buf()
}

fn checkpoint_dir(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(resolve_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?))
}

/// Loads the checkpoint and applies command-line decoder overrides.
fn load_for_inference<T: Real>(cfg: &RunConfig, common: &CommonArgs) -> Result<Checkpoint<T>> {
    let mut ck = load_checkpoint::<T>(checkpoint_dir(cfg)?)?;
    if let Some(m) = common.decoder_mode {
        ck.model = Model::from_params(
            crate::model::ModelConfig { decoder_mode: m, ..ck.model.config.clone() },
            ck.model.params,
        )?;
    }
    Ok(ck)
}

fn decode_settings(cfg: &RunConfig, ck_max_len: usize) -> crate::eval::DecodeConfig {
    let mut d = cfg.decode;
    d.max_len = d.max_len.min(ck_max_len);
    d
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if a.test.is_some() {
        cfg.paths.test.clone_from(&a.test);
    }
    if a.refs.is_some() {
        cfg.paths.refs.clone_from(&a.refs);
    }
    if a.vocab.is_some() {
        cfg.paths.vocab.clone_from(&a.vocab);
    }
    match cfg.train.precision {
        Dtype::F64 => eval_with::<f64>(&cfg, a, out),
        Dtype::F32 => eval_with::<f32>(&cfg, a, out),
    }
}

fn eval_with<T: Real>(cfg: &RunConfig, a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_for_inference::<T>(cfg, &a.common)?;
    if let Some(p) = &cfg.paths.vocab {
        ck.check_vocab(&Vocab::load(p)?)?;
    }
    let test_path = required(&cfg.paths.test, "test")?;
    let max_turns = ck.model.config.max_turns;
    let test = match &cfg.paths.refs {
        Some(refs) => TestSet::from_references(
            &load_contexts(test_path)?,
            &load_references(refs)?,
            &ck.vocab,
            max_turns,
        )?,
        None => TestSet::from_dialogues(&load_dialogues(test_path)?.dialogues, &ck.vocab, max_turns),
    };
    let decode = decode_settings(cfg, ck.model.config.max_sentence_len);
    let evaluation = evaluate_model(&ck.model, &ck.vocab, &test, &decode)?;
    let dir = match &a.output_dir {
        Some(d) => d.clone(),
        None => checkpoint_dir(cfg)?,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut replies = String::new();
    for r in &evaluation.replies {
        replies.push_str(&detokenize(r));
        replies.push('\n');
    }
    let report = format!("{}\n", evaluation.report);
    for (name, text) in [("replies.txt", &replies), ("report.txt", &report)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = base_config(&a.common)?;
    match cfg.train.precision {
        Dtype::F64 => generate_with::<f64>(&cfg, a, out),
        Dtype::F32 => generate_with::<f32>(&cfg, a, out),
    }
}

/// Replies to each context; empty contexts get empty replies.
pub fn reply_all<T: Real>(
    ck: &Checkpoint<T>,
    contexts: &[Vec<String>],
    decode: &crate::eval::DecodeConfig,
) -> Result<Vec<String>> {
    let keep = ck.model.config.max_turns - 1;
    let mut replies = vec![String::new(); contexts.len()];
    let nonempty: Vec<usize> = (0..contexts.len()).filter(|&i| !contexts[i].is_empty()).collect();
    if nonempty.is_empty() {
        return Ok(replies);
    }
    let ids: Vec<Vec<Vec<usize>>> = nonempty
        .iter()
        .map(|&i| {
            let c = &contexts[i];
            c[c.len().saturating_sub(keep)..]
                .iter()
                .map(|u| ck.vocab.encode(&tokenize(u)))
                .collect()
        })
        .collect();
    let decoder = ModelDecoder::new(&ck.model, &ids)?;
    let idx: Vec<usize> = (0..ids.len()).collect();
    for (slot, r) in nonempty.iter().zip(decode_all(&decoder, &idx, decode)?) {
        replies[*slot] = detokenize(&reply_tokens(&ck.vocab, &r));
    }
    Ok(replies)
}

fn generate_with<T: Real>(cfg: &RunConfig, a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_for_inference::<T>(cfg, &a.common)?;
    let text = fs::read_to_string(&a.contexts).map_err(|e| Error::io(&a.contexts, e))?;
    let contexts: Vec<Vec<String>> = text.lines().map(|l| Dialogue::parse(l).utterances).collect();
    let decode = decode_settings(cfg, ck.model.config.max_sentence_len);
    let mut body = String::new();
    for r in reply_all(&ck, &contexts, &decode)? {
        body.push_str(&r);
        body.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, body).map_err(|e| Error::io(p, e)),
        None => out.write_all(body.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_chat(a: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let cfg = base_config(&a.common)?;
    match cfg.train.precision {
        Dtype::F64 => chat_with::<f64>(&cfg, a, input, out),
        Dtype::F32 => chat_with::<f32>(&cfg, a, input, out),
    }
}

/// Rolling window of the most recent turns.
#[derive(Clone, Debug, Default)]
pub struct ChatHistory {
    turns: VecDeque<String>,
    capacity: usize,
}

impl ChatHistory {
    pub fn new(capacity: usize) -> Self {
        ChatHistory {
            turns: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, turn: String) {
        self.turns.push_back(turn);
        while self.turns.len() > self.capacity {
            self.turns.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.turns.clear();
    }

    pub fn turns(&self) -> Vec<String> {
        self.turns.iter().cloned().collect()
    }
}

fn chat_with<T: Real>(cfg: &RunConfig, a: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let ck = load_for_inference::<T>(cfg, &a.common)?;
    let decode = decode_settings(cfg, ck.model.config.max_sentence_len);
    let mut history = ChatHistory::new(ck.model.config.max_turns - 1);
    let io = |e| Error::io("<stdio>", e);
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line).map_err(io)? == 0 {
            return Ok(());
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => return Ok(()),
            "/reset" => {
                history.clear();
                writeln!(out, "[context cleared]").map_err(io)?;
            }
            "/context" => {
                let turns = history.turns();
                for (i, t) in turns.iter().enumerate() {
                    writeln!(out, "[{i}] {t}").map_err(io)?;
                }
                writeln!(out, "[{} turns]", turns.len()).map_err(io)?;
            }
            _ => {
                history.push(text.to_string());
                let reply = reply_all(&ck, &[history.turns()], &decode)?.remove(0);
                writeln!(out, "{reply}").map_err(io)?;
                if !reply.is_empty() {
                    history.push(reply);
                }
            }
        }
        out.flush().map_err(io)?;
    }
}
