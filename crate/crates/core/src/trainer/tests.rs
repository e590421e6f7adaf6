use super::*;
use crate::corpus::{build_vocab, corpus_samples, parse_dialogues};
use crate::model::DecoderMode;

const TEXT: &str = "\
hello there __eou__ hi , how are you ? __eou__ fine thanks __eou__
what time is it ? __eou__ it is six . __eou__
do you like tea ? __eou__ yes , with milk . __eou__ me too __eou__
where is the bus ? __eou__ over there __eou__
good morning __eou__ good morning , doctor __eou__ have you got a fever ? __eou__
";

fn setup(d: usize) -> (ModelConfig, Vocab, Vec<Sample>) {
    let dialogues = parse_dialogues(TEXT).dialogues;
    let vocab = build_vocab(&dialogues, 13500);
    let cfg = ModelConfig {
        d_model: d,
        heads: 2,
        enc_layers: 1,
        dec_layers_intention: 1,
        dec_layers_generation: 1,
        vocab_size: vocab.len(),
        max_turns: 4,
        max_sentence_len: 10,
        decoder_mode: DecoderMode::XFusion,
        dropout: 0.0,
        ..Default::default()
    };
    let samples = corpus_samples(&dialogues, &vocab, cfg.max_turns);
    (cfg, vocab, samples)
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn repeated_batch_overfits() {
    let (cfg, vocab, samples) = setup(32);
    let mut t = Trainer::<f64>::init(cfg, vocab, train_config(1)).unwrap();
    let batch = Batch::collate(&samples[..4], 4, 10).unwrap();
    let mut averages = Vec::new();
    for _ in 0..10 {
        let stats = t.train_epoch(0, &vec![batch.clone(); 20]).unwrap();
        averages.push(stats.train_nll);
    }
    for w in averages.windows(2) {
        assert!(w[1] < w[0], "{averages:?}");
    }
    assert!(*averages.last().unwrap() < 0.5, "{averages:?}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (cfg, vocab, samples) = setup(8);
    let config = TrainConfig { lr: 0.0, ..train_config(2) };
    let mut t = Trainer::<f64>::init(cfg, vocab, config).unwrap();
    let before = t.model.params.clone();
    let batches = t.epoch_batches(&samples, 0).unwrap();
    let a = t.train_epoch(0, &batches).unwrap();
    let b = t.train_epoch(1, &batches).unwrap();
    assert_eq!(t.model.params, before);
    assert_eq!(a.train_nll, b.train_nll);
}

#[test]
fn identical_seeds_give_identical_curves() {
    let (cfg, vocab, samples) = setup(8);
    let run = |seed| {
        let config = TrainConfig { epochs: 2, ..train_config(seed) };
        let mut t = Trainer::<f64>::init(cfg.clone(), vocab.clone(), config).unwrap();
        let hist = t.fit(&samples, &samples[..3], &mut |_| {}).unwrap();
        hist.iter().map(|h| (h.train_nll, h.dev_nll)).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn dropout_stream_is_deterministic() {
    let (cfg, vocab, samples) = setup(8);
    let cfg = ModelConfig { dropout: 0.2, ..cfg };
    let run = || {
        let mut t = Trainer::<f64>::init(cfg.clone(), vocab.clone(), train_config(3)).unwrap();
        t.fit(&samples, &[], &mut |_| {}).unwrap();
        t.model.params
    };
    assert_eq!(run(), run());
}

fn logits(model: &Model<f64>, batch: &Batch) -> Vec<f64> {
    let tape = Tape::new();
    let bm = model.bind(&tape, false, None).unwrap();
    bm.forward_logits(batch).unwrap().logits.value().data().to_vec()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, vocab, samples) = setup(8);
    let mut t = Trainer::<f64>::init(cfg, vocab.clone(), train_config(4)).unwrap();
    let batches = t.epoch_batches(&samples, 0).unwrap();
    let stats = t.train_epoch(0, &batches).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let manifest = t.save(&a, &stats).unwrap();
    assert_eq!(manifest.step, t.step);

    let ck = load_checkpoint::<f64>(&a).unwrap();
    assert_eq!(ck.model, t.model);
    assert_eq!(ck.optimizer, t.optimizer);
    assert_eq!(ck.vocab, vocab);
    assert_eq!(logits(&ck.model, &batches[0]), logits(&t.model, &batches[0]));
    ck.check_vocab(&vocab).unwrap();

    let b = dir.path().join("b");
    let progress = Progress {
        step: ck.manifest.step,
        epoch: ck.manifest.epoch,
        metrics: ck.manifest.metrics.clone(),
    };
    save_checkpoint(&b, &ck.model, &ck.optimizer, &ck.vocab, &ck.manifest.train, &progress).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE, VOCAB_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpoint_refusals() {
    let (cfg, vocab, _) = setup(8);
    let t = Trainer::<f64>::init(cfg, vocab.clone(), train_config(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stats = EpochStats {
        epoch: 0,
        step: 0,
        steps: 0,
        train_nll: 1.0,
        dev_nll: None,
        tokens: 0,
        tokens_per_sec: 0.0,
    };
    t.save(dir.path(), &stats).unwrap();

    let other = build_vocab(&parse_dialogues("x y __eou__ z __eou__").dialogues, 100);
    let ck = load_checkpoint::<f64>(dir.path()).unwrap();
    assert!(matches!(ck.check_vocab(&other), Err(Error::Version(_))));

    let manifest_path = dir.path().join(MANIFEST_FILE);
    let original = std::fs::read_to_string(&manifest_path).unwrap();
    std::fs::write(&manifest_path, original.replace("\"version\": 1", "\"version\": 99")).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Version(_))));
    std::fs::write(&manifest_path, original.replace("\"enc_layers\": 1", "\"enc_layers\": 2")).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Version(_))));
    std::fs::write(&manifest_path, &original).unwrap();

    let blob_path = dir.path().join(BLOB_FILE);
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[10] ^= 1;
    std::fs::write(&blob_path, &blob).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Corruption(_))));
    assert!(matches!(load_checkpoint::<f64>(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn single_precision_loads_double_checkpoint() {
    let (cfg, vocab, samples) = setup(8);
    let t = Trainer::<f64>::init(cfg, vocab, train_config(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stats = t.clone().train_epoch(0, &[]).unwrap();
    t.save(dir.path(), &stats).unwrap();
    let ck = load_checkpoint::<f32>(dir.path()).unwrap();
    let batch = Batch::collate(&samples[..2], 4, 10).unwrap();
    let tape = Tape::new();
    let l32 = ck.model.bind(&tape, false, None).unwrap().forward_logits(&batch).unwrap().logits.value();
    let l64 = logits(&t.model, &batch);
    for (a, b) in l32.data().iter().zip(&l64) {
        assert!((f64::from(*a) - b).abs() < 1e-3);
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (cfg, vocab, samples) = setup(8);
    let per_epoch = samples.len().div_ceil(4);
    for k in [2, per_epoch, per_epoch + 1] {
        let config = TrainConfig { max_steps: Some(k + 1), ..train_config(7) };
        let mut full = Trainer::<f64>::init(cfg.clone(), vocab.clone(), config.clone()).unwrap();
        full.fit(&samples, &[], &mut |_| {}).unwrap();
        assert_eq!(full.step, k + 1);

        let dir = tempfile::tempdir().unwrap();
        let first = TrainConfig { max_steps: Some(k), ..config.clone() };
        let mut part = Trainer::<f64>::init(cfg.clone(), vocab.clone(), first).unwrap();
        let hist = part.fit(&samples, &[], &mut |_| {}).unwrap();
        part.save(dir.path(), hist.last().unwrap()).unwrap();
        let ck = load_checkpoint::<f64>(dir.path()).unwrap();
        let mut resumed = Trainer::resume(ck, config).unwrap();
        resumed.fit(&samples, &[], &mut |_| {}).unwrap();
        assert_eq!(resumed.step, k + 1);
        assert_eq!(resumed.model.params, full.model.params, "k = {k}");
        assert_eq!(resumed.optimizer, full.optimizer);
    }
}

#[test]
fn fit_writes_last_and_best() {
    let (cfg, vocab, samples) = setup(8);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..train_config(8)
    };
    let mut t = Trainer::<f64>::init(cfg, vocab, config).unwrap();
    let mut lines = Vec::new();
    let hist = t.fit(&samples, &samples[..2], &mut |s| lines.push(s.log_line())).unwrap();
    assert_eq!(hist.len(), 2);
    assert!(lines[0].starts_with("event=epoch epoch=0 step="));
    let last = read_manifest(dir.path().join(LAST_DIR)).unwrap();
    assert_eq!(last.step, t.step);
    let best = read_manifest(dir.path().join(BEST_DIR)).unwrap();
    assert_eq!(best.metrics["dev_nll"], t.best_dev_nll.unwrap());
}

#[test]
fn warmup_ramps_learning_rate() {
    let c = TrainConfig { warmup_steps: 4, ..Default::default() };
    assert_eq!(c.lr_at(0), 0.25e-3);
    assert_eq!(c.lr_at(3), 1e-3);
    assert_eq!(c.lr_at(100), 1e-3);
    assert_eq!(TrainConfig::default().lr_at(0), 1e-3);
}

#[test]
fn seeds_are_stream_separated() {
    assert_eq!(derive_seed(1, 1, 0), derive_seed(1, 1, 0));
    assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 2, 0));
    assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
    assert_ne!(derive_seed(1, 1, 0), derive_seed(2, 1, 0));
}
