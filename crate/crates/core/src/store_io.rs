//! Persistence: the TPVF vector file, run manifests and the metrics stream.
//!
//! TPVF layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `TPV1`                            |
//! | 4      | 4    | version `u32` (= 1)                     |
//! | 8      | 1    | kind `u8` (0 = soft prompt, 1 = TPV)    |
//! | 9      | 4    | `d` `u32`                               |
//! | 13     | 4    | `r` `u32`                               |
//! | 17     | 8    | init fingerprint `u64` (0 for kind 0)   |
//! | 25     | 2    | task id length `u16`                    |
//! | 27     | n    | task id, UTF-8                          |
//! | 27+n   | 4rd  | payload, `f32`, token-major             |
//!
//! Values are rounded to `f32` (nearest-even) on write and widened
//! losslessly on read.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::Mat;
use crate::tpv::{SoftPrompt, TaskPromptVector};

pub const MAGIC: &[u8; 4] = b"TPV1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 27;

#[derive(Debug, thiserror::Error)]
pub enum TpvfError {
    #[error("not a TPVF file")]
    BadMagic,
    #[error("unsupported TPVF version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown TPVF kind {0}")]
    UnknownKind(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes: {0} after payload")]
    TrailingBytes(usize),
    #[error("task id is not valid UTF-8")]
    BadTaskId,
    #[error("task id longer than 65535 bytes")]
    TaskIdTooLong,
    #[error("dimension does not fit in u32")]
    DimensionTooLarge,
    #[error("non-finite value in payload")]
    NonFinite,
    #[error("value {0} overflows f32")]
    F32Overflow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TpvfKind {
    SoftPrompt = 0,
    TaskPromptVector = 1,
}

/// Contents of one TPVF file.
#[derive(Debug, Clone, PartialEq)]
pub enum TpvfObject {
    Prompt { task_id: String, prompt: SoftPrompt },
    Vector(TaskPromptVector),
}

impl TpvfObject {
    pub fn kind(&self) -> TpvfKind {
        match self {
            TpvfObject::Prompt { .. } => TpvfKind::SoftPrompt,
            TpvfObject::Vector(_) => TpvfKind::TaskPromptVector,
        }
    }

    pub fn task_id(&self) -> &str {
        match self {
            TpvfObject::Prompt { task_id, .. } => task_id,
            TpvfObject::Vector(t) => &t.task_id,
        }
    }

    pub fn weights(&self) -> &Mat {
        match self {
            TpvfObject::Prompt { prompt, .. } => prompt.weights(),
            TpvfObject::Vector(t) => t.delta(),
        }
    }

    pub fn into_tpv(self) -> Option<TaskPromptVector> {
        match self {
            TpvfObject::Vector(t) => Some(t),
            TpvfObject::Prompt { .. } => None,
        }
    }

    pub fn into_prompt(self) -> Option<SoftPrompt> {
        match self {
            TpvfObject::Prompt { prompt, .. } => Some(prompt),
            TpvfObject::Vector(_) => None,
        }
    }
}

fn to_u32(v: usize) -> std::result::Result<u32, TpvfError> {
    u32::try_from(v).map_err(|_| TpvfError::DimensionTooLarge)
}

pub fn encode_tpvf(obj: &TpvfObject) -> std::result::Result<Vec<u8>, TpvfError> {
    let (kind, fp) = match obj {
        TpvfObject::Prompt { .. } => (0u8, 0u64),
        TpvfObject::Vector(t) => (1u8, t.init_fingerprint()),
    };
    let w = obj.weights();
    let (d, r) = w.shape();
    let id = obj.task_id().as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| TpvfError::TaskIdTooLong)?;
    let mut out = Vec::with_capacity(HEADER_LEN + id.len() + 4 * d * r);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    out.extend_from_slice(&to_u32(r)?.to_le_bytes());
    out.extend_from_slice(&fp.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    for j in 0..r {
        for i in 0..d {
            let v = w.get(i, j);
            let f = v as f32;
            if !f.is_finite() {
                return Err(TpvfError::F32Overflow(v));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tpvf(bytes: &[u8]) -> std::result::Result<TpvfObject, TpvfError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TpvfError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(TpvfError::TruncatedHeader);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(TpvfError::UnsupportedVersion(version));
    }
    let kind = bytes[8];
    if kind > 1 {
        return Err(TpvfError::UnknownKind(kind));
    }
    let d = u32_at(9) as usize;
    let r = u32_at(13) as usize;
    let fp = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes"));
    let id_len = u16::from_le_bytes([bytes[25], bytes[26]]) as usize;
    let id_end = HEADER_LEN + id_len;
    if bytes.len() < id_end {
        return Err(TpvfError::TruncatedHeader);
    }
    let task_id = std::str::from_utf8(&bytes[HEADER_LEN..id_end])
        .map_err(|_| TpvfError::BadTaskId)?
        .to_owned();
    let expected = d
        .checked_mul(r)
        .and_then(|n| n.checked_mul(4))
        .ok_or(TpvfError::DimensionTooLarge)?;
    let payload = &bytes[id_end..];
    if payload.len() < expected {
        return Err(TpvfError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(TpvfError::TrailingBytes(payload.len() - expected));
    }
    let mut w = Mat::zeros(d, r);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(TpvfError::NonFinite);
        }
        w.set(k % d, k / d, f64::from(v));
    }
    Ok(match kind {
        0 => TpvfObject::Prompt {
            task_id,
            prompt: SoftPrompt::new(w),
        },
        _ => TpvfObject::Vector(TaskPromptVector::new(task_id, w, fp)),
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_tpvf(path: impl AsRef<Path>, obj: &TpvfObject) -> Result<()> {
    let bytes = encode_tpvf(obj)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_tpvf(path: impl AsRef<Path>) -> Result<TpvfObject> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tpvf(&bytes)?)
}

/// Rounds every entry through `f32`, i.e. what a TPVF round trip yields.
pub fn quantize_f32(m: &Mat) -> Mat {
    let (d, r) = m.shape();
    let data = m.as_slice().iter().map(|v| f64::from(*v as f32)).collect();
    Mat::from_vec(d, r, data).expect("rounded finite values stay finite")
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Final,
}

/// One line of the metrics JSONL stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub kind: RecordKind,
    pub run: String,
    pub seed: u64,
    pub step: usize,
    pub mode: String,
    pub selected: Vec<String>,
    pub ts: Option<f64>,
    pub kc: Option<f64>,
    pub greedy_objective: Option<f64>,
    pub exact_objective: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Whether the group was recomputed before the update recorded here.
    pub regrouped: bool,
}

impl MetricsRecord {
    pub fn new(kind: RecordKind, run: &str, seed: u64, step: usize, mode: &str) -> Self {
        MetricsRecord {
            schema: METRICS_SCHEMA_VERSION,
            kind,
            run: run.to_owned(),
            seed,
            step,
            mode: mode.to_owned(),
            selected: Vec::new(),
            ts: None,
            kc: None,
            greedy_objective: None,
            exact_objective: None,
            train_loss: None,
            val_accuracy: None,
            test_accuracy: None,
            regrouped: false,
        }
    }
}

pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(path.as_ref(), metrics_to_jsonl(records)?.as_bytes())
}

/// Appends records to an existing (or new) JSONL file.
pub fn append_metrics(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_to_jsonl(records)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)?;
        if rec.schema != METRICS_SCHEMA_VERSION {
            return Err(Error::config(format!("unsupported metrics schema {}", rec.schema)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reproducibility envelope for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path → sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output path → git-style blob hash.
    pub outputs: BTreeMap<String, String>,
    /// Hash over the sorted `(path, blob hash)` pairs.
    pub content_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// sha256 of `"blob <len>\0" + content`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            engine_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            seed,
            config,
            inputs: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: BTreeMap::new(),
            content_hash: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let h = file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Hashes the given outputs (paths reported relative to `root`) and
    /// stamps the finish time.
    pub fn finish(&mut self, root: &Path, outputs: &[PathBuf]) -> Result<()> {
        for p in outputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(p).display().to_string();
            self.outputs.insert(rel, blob_hash(&bytes));
        }
        let mut h = Sha256::new();
        for (k, v) in &self.outputs {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        self.content_hash = hex(&h.finalize());
        self.finished_unix = unix_now();
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(path.as_ref(), json.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
