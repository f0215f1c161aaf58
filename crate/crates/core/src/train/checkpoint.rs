//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "E2EDCKPT"
//! version  u32 LE
//! length   u64 LE   payload byte count
//! sha256   32 bytes of the payload
//! payload  u64 LE header length, JSON header, u32 LE tensor count, then per
//!          tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, f64 LE values
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamState;
use super::TrainConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"E2EDCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8 + 32;

/// Training progress. Shuffling and dropout streams are derived from the
/// seed and these counters, so they are the complete RNG state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already taken from the current epoch.
    pub batch_in_epoch: u64,
    /// Optimizer steps so far.
    pub step: u64,
    /// Summed batch losses of the current epoch so far.
    pub epoch_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub adam: AdamState,
    pub counters: Counters,
    /// Best dev Success F1 seen so far, if any evaluation ran.
    pub best_dev_f1: Option<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model_config.clone(), self.params.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocab,
    counters: Counters,
    best_dev_f1: Option<f64>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend(x.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        vocab: ckpt.vocab.clone(),
        counters: ckpt.counters,
        best_dev_f1: ckpt.best_dev_f1,
    })?;
    let mut payload = Vec::new();
    payload.extend((header.len() as u64).to_le_bytes());
    payload.extend(&header);
    payload.extend((3 * ckpt.params.len() as u32).to_le_bytes());
    for (_, name, t) in ckpt.params.iter() {
        put_tensor(&mut payload, name, t.shape(), t.data());
    }
    for (prefix, moments) in [(ADAM_M, &ckpt.adam.m), (ADAM_V, &ckpt.adam.v)] {
        for (id, name, t) in ckpt.params.iter() {
            put_tensor(&mut payload, &format!("{prefix}{name}"), t.shape(), &moments[id.index()]);
        }
    }
    payload.extend(ckpt.adam.t.to_le_bytes());

    let mut out = Vec::with_capacity(PREAMBLE + payload.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend(Sha256::digest(&payload));
    out.extend(payload);
    Ok(out)
}

/// Hex SHA-256 of the payload; identifies a checkpoint's contents.
pub fn checksum(bytes: &[u8]) -> Result<String> {
    if bytes.len() < PREAMBLE {
        return Err(Error::CorruptCheckpoint("file shorter than its preamble".into()));
    }
    Ok(bytes[20..52].iter().map(|b| format!("{b:02x}")).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("length overflow".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload = &bytes[PREAMBLE..];
    if payload.len() as u64 != len || Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    if count % 3 != 0 {
        return Err(Error::CorruptCheckpoint(format!("{count} tensors")));
    }
    let n = count / 3;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        params.add(name, t)?;
    }
    let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for (prefix, slot) in [ADAM_M, ADAM_V].iter().zip(moments.iter_mut()) {
        for (id, name, t) in params.iter() {
            let (got, m) = r.tensor()?;
            if got != format!("{prefix}{name}") || m.shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!("optimizer state for {name}")));
            }
            debug_assert_eq!(id.index(), slot.len());
            slot.push(m.into_data());
        }
    }
    let t = r.u64()?;
    if r.pos != payload.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let [m, v] = moments;
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        vocab: header.vocab,
        params,
        adam: AdamState { m, v, t },
        counters: header.counters,
        best_dev_f1: header.best_dev_f1,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
/// Returns the checksum.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    checksum(&bytes)
}

/// The checkpoint and its checksum.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode(&bytes)?;
    Ok((ckpt, checksum(&bytes)?))
}
