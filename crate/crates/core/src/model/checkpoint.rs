//! Checkpoint file: magic, version, a JSON header, then raw little-endian
//! f32 tensors (parameters, then Adam first and second moments).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::train::TrainConfig;
use super::transformer::{Model, ModelConfig, Param};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEMGENCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub train_config: TrainConfig,
    pub step: u64,
    pub data_seed: u64,
    /// Caller-defined payload (task config, vocabulary, ...).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    data_seed: u64,
    next_batch_index: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    rng: RngState,
    adam: AdamHeader,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, values: &[f32]| {
            tensors.push(TensorEntry { name, shape: [rows, cols], dtype: "f32".into(), offset: data.len() as u64 });
            for x in values {
                data.extend_from_slice(&x.to_le_bytes());
            }
        };
        for p in &self.model.params {
            push(p.name.clone(), p.rows, p.cols, &p.data);
        }
        for (p, m) in self.model.params.iter().zip(&self.optimizer.m) {
            push(format!("adam.m.{}", p.name), p.rows, p.cols, m);
        }
        for (p, v) in self.model.params.iter().zip(&self.optimizer.v) {
            push(format!("adam.v.{}", p.name), p.rows, p.cols, v);
        }
        let header = Header {
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            rng: RngState { data_seed: self.data_seed, next_batch_index: self.step },
            adam: AdamHeader {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                t: self.optimizer.t,
            },
            metadata: self.metadata.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| fmt("truncated"))?;
        let header_bytes = body.get(..hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| fmt(&format!("header: {e}")))?;
        let data = &body[hlen..];
        let mut template: Model<f32> = Model::zeroed(header.model_config.clone())?;
        let n = template.params.len();
        if header.tensors.len() != 3 * n {
            return Err(fmt("tensor count does not match the model config"));
        }
        let read = |e: &TensorEntry, want: &Param<f32>, prefix: &str| -> Result<Vec<f32>> {
            if e.name != format!("{prefix}{}", want.name) || e.shape != [want.rows, want.cols] || e.dtype != "f32" {
                return Err(fmt(&format!("unexpected tensor {} {:?}", e.name, e.shape)));
            }
            let start = e.offset as usize;
            let end = start + 4 * want.len();
            let raw = data.get(start..end).ok_or_else(|| fmt(&format!("tensor {} out of bounds", e.name)))?;
            Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let p = template.params[i].clone();
            template.params[i].data = read(&header.tensors[i], &p, "")?;
            m.push(read(&header.tensors[n + i], &p, "adam.m.")?);
            v.push(read(&header.tensors[2 * n + i], &p, "adam.v.")?);
        }
        Ok(Checkpoint {
            model: template,
            optimizer: Adam {
                beta1: header.adam.beta1,
                beta2: header.adam.beta2,
                eps: header.adam.eps,
                t: header.adam.t,
                m,
                v,
            },
            train_config: header.train_config,
            step: header.step,
            data_seed: header.rng.data_seed,
            metadata: header.metadata,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{ArithConfig, TaskConfig};
    use crate::model::train::{batch_examples, encode_batch, LossReduction, Trainer};

    fn trainer() -> (Trainer, TaskConfig) {
        let task = TaskConfig::Arithmetic(ArithConfig::generate_with(4, [1, 9], 3, 0.2, false).unwrap());
        let cfg = ModelConfig {
            n_layers: 2,
            hidden_size: 16,
            n_heads: 2,
            vocab_size: task.vocab().len(),
            max_seq_len: task.max_sequence_len(),
            seed: 8,
        };
        let tc = TrainConfig { learning_rate: 1e-3, batch_size: 4, ..Default::default() };
        (Trainer::new(Model::init(cfg).unwrap(), tc, 77).unwrap(), task)
    }

    fn run(t: &mut Trainer, task: &TaskConfig, steps: u64) -> Vec<f32> {
        let vocab = task.vocab();
        (0..steps)
            .map(|_| {
                let exs = batch_examples(task, t.data_seed, t.step, t.config.batch_size).unwrap();
                t.train_step(&encode_batch(&vocab, &exs, LossReduction::Token).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut t, task) = trainer();
        run(&mut t, &task, 3);
        let ck = t.checkpoint(serde_json::json!({"note": "x"}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for (a, b) in ck.model.params.iter().zip(&back.model.params) {
            let bits = |p: &Param<f32>| p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_magic_and_version_are_rejected() {
        let (t, _) = trainer();
        let mut bytes = t.checkpoint(serde_json::Value::Null).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut a, task) = trainer();
        run(&mut a, &task, 5);
        let saved = Checkpoint::from_bytes(&a.checkpoint(serde_json::Value::Null).to_bytes().unwrap()).unwrap();
        let straight = run(&mut a, &task, 10);
        let mut b = Trainer::from_checkpoint(saved);
        let resumed = run(&mut b, &task, 10);
        assert_eq!(straight, resumed);
        assert_eq!(a.model, b.model);
    }
}
