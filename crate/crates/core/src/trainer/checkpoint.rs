use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use super::TrainConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::{Dtype, Real, Tensor};

pub const FORMAT: &str = "xrecosa-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

/// Location of one tensor inside the binary blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optimizer: AdamWConfig,
    pub optimizer_steps: u64,
    pub dtype: Dtype,
    pub vocab_hash: String,
    pub step: usize,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real = f64> {
    pub manifest: Manifest,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub vocab: Vocab,
}

impl<T: Real> Checkpoint<T> {
    /// Refuses a vocabulary other than the one the model was trained with.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let hash = vocab.hash();
        if hash != self.manifest.vocab_hash {
            return Err(Error::Version(format!(
                "vocabulary hash {hash} differs from checkpoint's {}",
                self.manifest.vocab_hash
            )));
        }
        Ok(())
    }
}

/// Training progress recorded alongside the tensors.
#[derive(Clone, Debug, Default)]
pub struct Progress {
    pub step: usize,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save_checkpoint<T: Real>(
    dir: impl AsRef<Path>,
    model: &Model<T>,
    optimizer: &AdamW<T>,
    vocab: &Vocab,
    train: &TrainConfig,
    progress: &Progress,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    if let Some((k, v)) = progress.metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("metric {k} is {v}")));
    }
    let mut named: BTreeMap<String, &Tensor<T>> = BTreeMap::new();
    for (prefix, set) in [(PARAM, &model.params), (ADAM_M, &optimizer.m), (ADAM_V, &optimizer.v)] {
        for (name, t) in set.iter() {
            named.insert(format!("{prefix}{name}"), t);
        }
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let offset = blob.len();
        for &x in t.data() {
            x.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name,
            offset,
            length: blob.len() - offset,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        model: model.config.clone(),
        train: train.clone(),
        optimizer: optimizer.config,
        optimizer_steps: optimizer.t,
        dtype: T::DTYPE,
        vocab_hash: vocab.hash(),
        step: progress.step,
        epoch: progress.epoch,
        metrics: progress.metrics.clone(),
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |file: &str, bytes: &[u8]| {
        let p = dir.join(file);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(BLOB_FILE, &blob)?;
    write(VOCAB_FILE, vocab.to_file_text().as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    write(MANIFEST_FILE, json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let p = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    let format = value.get("format").and_then(|v| v.as_str());
    let version = value.get("version").and_then(|v| v.as_u64());
    if format != Some(FORMAT) || version != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::Version(format!(
            "{}: expected {FORMAT} v{FORMAT_VERSION}, found {:?} v{:?}",
            p.display(),
            format,
            version
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::Version(format!("{}: {e}", p.display())))
}

/// Loads a checkpoint, converting stored tensors to `T` if needed.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.blob_sha256 {
        return Err(Error::Corruption(format!(
            "{}: sha256 {digest} does not match manifest",
            blob_path.display()
        )));
    }
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(Error::Corruption(format!(
            "{}: vocabulary hash does not match manifest",
            dir.display()
        )));
    }

    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let width = entry.dtype.size_of();
        let end = entry.offset.checked_add(entry.length);
        if entry.length != numel * width || end.is_none_or(|e| e > blob.len()) {
            return Err(Error::Corruption(format!("bad extent for tensor '{}'", entry.name)));
        }
        let bytes = &blob[entry.offset..entry.offset + entry.length];
        let data: Vec<T> = bytes
            .chunks_exact(width)
            .map(|c| match entry.dtype {
                Dtype::F64 => T::lit(f64::read_le(c)),
                Dtype::F32 => T::lit(f64::from(f32::read_le(c))),
            })
            .collect();
        let tensor = Tensor::new(&entry.shape, data)?;
        let (set, name) = if let Some(n) = entry.name.strip_prefix(PARAM) {
            (&mut params, n)
        } else if let Some(n) = entry.name.strip_prefix(ADAM_M) {
            (&mut m, n)
        } else if let Some(n) = entry.name.strip_prefix(ADAM_V) {
            (&mut v, n)
        } else {
            return Err(Error::Format(format!("unknown tensor group in '{}'", entry.name)));
        };
        set.insert(name, tensor)?;
    }
    let model = Model::from_params(manifest.model.clone(), params)
        .map_err(|e| Error::Version(format!("parameters do not fit the stored configuration: {e}")))?;
    if m.names().ne(model.params.names()) || v.names().ne(model.params.names()) {
        return Err(Error::Version("optimizer state does not match parameters".into()));
    }
    let optimizer = AdamW {
        config: manifest.optimizer,
        t: manifest.optimizer_steps,
        m,
        v,
    };
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
        vocab,
    })
}
