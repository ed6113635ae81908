//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "EV2K" | u32 version | u8 storage (0 = f64, 1 = f32)
//! u32 header length | header JSON
//! u32 blob count | blobs: u32 name length, name, u32 rank, u64 extents…, values
//! u32 CRC32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::mode::{BankConfig, ExpertBank};
use crate::scalar::Scalar;
use crate::schedule::ScheduleSpec;
use crate::tensor::Tensor;

use super::optim::{MomentSlot, OptimizerState};

pub const MAGIC: &[u8; 4] = b"EV2K";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Storage {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schedule: ScheduleSpec,
    pub bank: BankConfig,
    pub partition: Vec<(usize, usize)>,
    pub w_a: f64,
    pub w_l: f64,
    pub vocab: Vec<String>,
    /// Last completed training step.
    pub step: usize,
    pub config: Option<TrainConfig>,
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub header: CheckpointHeader,
    pub bank: ExpertBank<S>,
    pub optimizer: OptimizerState<S>,
}

const PARAM: &str = "param:";
const MOM1: &str = "adam.m:";
const MOM2: &str = "adam.v:";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>, storage: Storage) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        match storage {
            Storage::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            Storage::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        }
    }
}

pub fn encode_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, storage: Storage) -> Result<Vec<u8>> {
    let mut header = ckpt.header.clone();
    header.optimizer_steps = ckpt.optimizer.slots.iter().map(|(k, s)| (k.clone(), s.step)).collect();
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(match storage {
        Storage::F64 => 0,
        Storage::F32 => 1,
    });
    put_u32(&mut out, header_json.len() as u32);
    out.extend_from_slice(&header_json);

    let params = ckpt.bank.params();
    let count = params.len() + 2 * ckpt.optimizer.slots.len();
    put_u32(&mut out, count as u32);
    for (name, t) in params.iter() {
        put_blob(&mut out, &format!("{PARAM}{name}"), t, storage);
    }
    for (name, slot) in &ckpt.optimizer.slots {
        put_blob(&mut out, &format!("{MOM1}{name}"), &slot.m, storage);
        put_blob(&mut out, &format!("{MOM2}{name}"), &slot.v, storage);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial checkpoint under `path`.
pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path, storage: Storage) -> Result<()> {
    let bytes = encode_checkpoint(ckpt, storage)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    decode_checkpoint(&std::fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        if end > self.buf.len() {
            return Err(Error::TruncatedFile);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Parsed<S> {
    header: CheckpointHeader,
    blobs: Vec<(String, Tensor<S>)>,
}

fn parse_body<S: Scalar>(body: &[u8]) -> Result<Parsed<S>> {
    let mut c = Cursor { buf: body, pos: 8 };
    let storage = match c.take(1)?[0] {
        0 => Storage::F64,
        1 => Storage::F32,
        b => return Err(Error::MalformedCheckpoint(format!("unknown storage tag {b}"))),
    };
    let hlen = c.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
    let count = c.u32()? as usize;
    let mut blobs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("blob name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or(Error::TruncatedFile)?;
        let data: Vec<S> = match storage {
            Storage::F64 => c
                .take(n.checked_mul(8).ok_or(Error::TruncatedFile)?)?
                .chunks_exact(8)
                .map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
            Storage::F32 => c
                .take(n.checked_mul(4).ok_or(Error::TruncatedFile)?)?
                .chunks_exact(4)
                .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        blobs.push((name, t));
    }
    if c.pos != body.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes before checksum".into()));
    }
    Ok(Parsed { header, blobs })
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    if bytes.len() < 13 {
        return Err(Error::TruncatedFile);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        // a body that does not even parse means bytes are missing
        return Err(match parse_body::<S>(body) {
            Err(Error::TruncatedFile) => Error::TruncatedFile,
            _ => Error::ChecksumMismatch,
        });
    }
    let Parsed { header, blobs } = parse_body::<S>(body)?;

    let mut params = ParamStore::new();
    let mut m1 = BTreeMap::new();
    let mut m2 = BTreeMap::new();
    for (name, t) in blobs {
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n, t);
        } else if let Some(n) = name.strip_prefix(MOM1) {
            m1.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(MOM2) {
            m2.insert(n.to_string(), t);
        } else {
            return Err(Error::MalformedCheckpoint(format!("unknown blob `{name}`")));
        }
    }
    let mut optimizer = OptimizerState::new();
    for (name, m) in m1 {
        let v = m2.remove(&name).ok_or_else(|| Error::MalformedCheckpoint(format!("missing second moment of `{name}`")))?;
        let step = *header
            .optimizer_steps
            .get(&name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing step count of `{name}`")))?;
        optimizer.slots.insert(name, MomentSlot { m, v, step });
    }
    if !m2.is_empty() {
        return Err(Error::MalformedCheckpoint("unpaired second moments".into()));
    }
    let bank = ExpertBank::from_parts(header.bank.clone(), params)
        .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    if bank.partition() != header.partition {
        return Err(Error::MalformedCheckpoint("stored partition disagrees with expert count".into()));
    }
    Ok(Checkpoint { header, bank, optimizer })
}
