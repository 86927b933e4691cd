//! Pairwise activation capture: run an example and its rephrasing, keep the
//! pair when one side memorizes and the other generalizes, and record both
//! tap vectors at the last prompt position.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{classify_output, rephrase_pair, BehaviorLabel, Example, TaskConfig, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::model::{generate, Model, TraceRequest};
use crate::rng::{indexed_rng, Rng};

pub const PAIR_MAGIC: &[u8; 8] = b"PAIRACT1";
pub const PAIR_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Identifies the model a set of activations came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Hex SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
    pub n_layers: usize,
    pub width: usize,
}

/// One divergent pair: tap vectors (`L * d`, layer-major) of the side that
/// memorized and of the side that generalized.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: u64,
    pub task: TaskKind,
    pub mem: Vec<f32>,
    pub gen: Vec<f32>,
}

impl PairRecord {
    pub fn side(&self, label: BehaviorLabel) -> &[f32] {
        match label {
            BehaviorLabel::Mem => &self.mem,
            _ => &self.gen,
        }
    }
}

/// Audit entry written next to the binary dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairIndexEntry {
    pub pair_id: u64,
    pub mem_input: String,
    pub gen_input: String,
    pub mem_output: String,
    pub gen_output: String,
    /// Whether the memorizing side is the unmodified candidate (as opposed
    /// to its rephrasing).
    pub mem_is_original: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub fingerprint: Fingerprint,
    pub records: Vec<PairRecord>,
}

impl PairDataset {
    pub fn n_layers(&self) -> usize {
        self.fingerprint.n_layers
    }

    pub fn width(&self) -> usize {
        self.fingerprint.width
    }

    /// Shape, finiteness, and pair-id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_layers() * self.width();
        let mut ids = std::collections::HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.mem.len() != n || r.gen.len() != n {
                return Err(Error::Shape(format!("pair {} activations are not {n} wide", r.pair_id)));
            }
            if r.mem.iter().chain(&r.gen).any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("pair {} has non-finite activations", r.pair_id)));
            }
            if !ids.insert(r.pair_id) {
                return Err(Error::Format(format!("duplicate pair id {}", r.pair_id)));
            }
        }
        Ok(())
    }

    /// The same pairs with memorizing and generalizing sides exchanged.
    pub fn swapped(&self) -> PairDataset {
        PairDataset {
            fingerprint: self.fingerprint.clone(),
            records: self
                .records
                .iter()
                .map(|r| PairRecord { mem: r.gen.clone(), gen: r.mem.clone(), ..r.clone() })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let hash = hex::decode(&self.fingerprint.checkpoint_hash)
            .ok()
            .filter(|h| h.len() == 32)
            .ok_or_else(|| Error::Format("checkpoint hash must be 32 hex-encoded bytes".into()))?;
        let n = self.n_layers() * self.width();
        let mut out = Vec::with_capacity(8 + 52 + self.records.len() * (9 + 8 * n) + 8);
        out.extend_from_slice(PAIR_MAGIC);
        out.extend_from_slice(&PAIR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_layers() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&hash);
        for r in &self.records {
            out.extend_from_slice(&r.pair_id.to_le_bytes());
            out.push(task_code(r.task));
            for x in r.mem.iter().chain(&r.gen) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = CRC64.checksum(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("pair dataset: {m}"));
        if bytes.len() < 8 || &bytes[..8] != PAIR_MAGIC {
            return Err(fmt("bad magic"));
        }
        if bytes.len() < 8 + 52 + 8 {
            return Err(fmt("truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != PAIR_VERSION {
            return Err(Error::Version { found: version, expected: PAIR_VERSION });
        }
        let (layers, width, count) = (u32_at(12) as usize, u32_at(16) as usize, u64_at(20) as usize);
        let hash = hex::encode(&bytes[28..60]);
        let n = layers * width;
        let rec_len = 9 + 8 * n;
        let expected = count
            .checked_mul(rec_len)
            .and_then(|x| x.checked_add(60 + 8))
            .ok_or_else(|| fmt("record count overflows"))?;
        if bytes.len() != expected {
            return Err(fmt(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let payload_end = bytes.len() - 8;
        if CRC64.checksum(&bytes[8..payload_end]) != u64_at(payload_end) {
            return Err(fmt("checksum mismatch"));
        }
        let floats = |s: &[u8]| s.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut records = Vec::with_capacity(count);
        for k in 0..count {
            let o = 60 + k * rec_len;
            let task = task_from_code(bytes[o + 8]).ok_or_else(|| fmt("unknown task code"))?;
            records.push(PairRecord {
                pair_id: u64_at(o),
                task,
                mem: floats(&bytes[o + 9..o + 9 + 4 * n]),
                gen: floats(&bytes[o + 9 + 4 * n..o + rec_len]),
            });
        }
        let ds = PairDataset {
            fingerprint: Fingerprint { checkpoint_hash: hash, n_layers: layers, width },
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn task_code(t: TaskKind) -> u8 {
    match t {
        TaskKind::InContext => 0,
        TaskKind::Arithmetic => 1,
    }
}

fn task_from_code(c: u8) -> Option<TaskKind> {
    match c {
        0 => Some(TaskKind::InContext),
        1 => Some(TaskKind::Arithmetic),
        _ => None,
    }
}

pub fn write_index(path: &Path, entries: &[PairIndexEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<PairIndexEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One side of a candidate: greedy output, its label, and the tap vectors at
/// the last prompt position.
pub struct SideRun {
    pub output: String,
    pub label: BehaviorLabel,
    pub activations: Vec<f32>,
}

pub fn run_side(model: &Model<f32>, vocab: &Vocab, ex: &Example, max_new: usize) -> Result<SideRun> {
    let prompt = vocab.encode_prompt(&ex.input_text)?;
    let last = prompt.len() - 1;
    let g = generate(model, &prompt, max_new, None, Some(&TraceRequest::Positions(vec![last])))?;
    let output = vocab.decode(g.generated());
    let label = classify_output(ex, &output)?;
    let activations = g
        .trace
        .as_ref()
        .and_then(|t| t.at_position(last))
        .ok_or_else(|| Error::Shape("trace lacks the last prompt position".into()))?
        .to_vec();
    Ok(SideRun { output, label, activations })
}

/// Runs `ex` and its rephrasing; returns a record iff their labels are
/// exactly one `Mem` and one `Gen`.
pub fn extract_pair(
    model: &Model<f32>,
    vocab: &Vocab,
    ex: &Example,
    rng: &mut Rng,
    max_new: usize,
) -> Result<Option<(PairRecord, PairIndexEntry)>> {
    let pair_id = ex.pair_id.ok_or_else(|| Error::Meta("candidate has no pair_id".into()))?;
    let twin = rephrase_pair(ex, rng)?;
    let a = run_side(model, vocab, ex, max_new)?;
    let b = run_side(model, vocab, &twin, max_new)?;
    let (mem, gen, mem_ex, gen_ex, mem_is_original) = match (a.label, b.label) {
        (BehaviorLabel::Mem, BehaviorLabel::Gen) => (a, b, ex, &twin, true),
        (BehaviorLabel::Gen, BehaviorLabel::Mem) => (b, a, &twin, ex, false),
        _ => return Ok(None),
    };
    let entry = PairIndexEntry {
        pair_id,
        mem_input: mem_ex.input_text.clone(),
        gen_input: gen_ex.input_text.clone(),
        mem_output: mem.output,
        gen_output: gen.output,
        mem_is_original,
    };
    let record = PairRecord { pair_id, task: ex.kind, mem: mem.activations, gen: gen.activations };
    Ok(Some((record, entry)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldStats {
    pub attempts: usize,
    pub collected: usize,
    pub target: usize,
    /// Divergent pairs dropped because the same two prompts were already
    /// collected.
    #[serde(default)]
    pub duplicates: usize,
}

impl YieldStats {
    pub fn yield_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.collected as f64 / self.attempts as f64
        }
    }
}

pub struct CaptureOutput {
    pub dataset: PairDataset,
    pub index: Vec<PairIndexEntry>,
    pub stats: YieldStats,
}

/// Candidates evaluated per parallel batch.
const CHUNK: usize = 64;

/// Draws candidate `i` from `indexed_rng(seed, i)` until `target_pairs`
/// divergent pairs are found or `max_attempts` candidates are spent. Records
/// keep candidate order regardless of scheduling.
pub fn build_pairwise_dataset(
    model: &Model<f32>,
    vocab: &Vocab,
    task: &TaskConfig,
    checkpoint_hash: &str,
    seed: u64,
    target_pairs: usize,
    max_attempts: usize,
    max_new: usize,
) -> Result<CaptureOutput> {
    if target_pairs == 0 {
        return Err(Error::Config("target_pairs must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(target_pairs);
    let mut index = Vec::with_capacity(target_pairs);
    let mut seen = std::collections::HashSet::new();
    let mut duplicates = 0;
    let mut attempts = 0;
    'outer: while attempts < max_attempts {
        let end = (attempts + CHUNK).min(max_attempts);
        let results: Vec<Result<Option<(PairRecord, PairIndexEntry)>>> = (attempts..end)
            .into_par_iter()
            .map(|i| {
                let mut rng = indexed_rng(seed, i as u64);
                let mut ex = task.probe_example(&mut rng)?;
                ex.pair_id = Some(i as u64);
                extract_pair(model, vocab, &ex, &mut rng, max_new)
            })
            .collect();
        for r in results {
            attempts += 1;
            if let Some((rec, entry)) = r? {
                if !seen.insert((entry.mem_input.clone(), entry.gen_input.clone())) {
                    duplicates += 1;
                    continue;
                }
                records.push(rec);
                index.push(entry);
                if records.len() == target_pairs {
                    break 'outer;
                }
            }
        }
    }
    let stats = YieldStats { attempts, collected: records.len(), target: target_pairs, duplicates };
    log::info!("capture: {} pairs from {} candidates ({} duplicates)", stats.collected, stats.attempts, duplicates);
    if (records.len() as f64) < 0.1 * target_pairs as f64 {
        return Err(Error::YieldTooLow { collected: records.len(), target: target_pairs, attempts });
    }
    let dataset = PairDataset {
        fingerprint: Fingerprint {
            checkpoint_hash: checkpoint_hash.to_string(),
            n_layers: model.config.n_layers,
            width: model.config.hidden_size,
        },
        records,
    };
    dataset.validate()?;
    Ok(CaptureOutput { dataset, index, stats })
}
