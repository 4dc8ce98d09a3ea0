//! Binary checkpoint format.
//!
//! ```text
//! "VITA" | u32 version | u32 len + config JSON | u32 tensor count |
//! per tensor: u32 len + name | u32 rank | u64 dims... | f32 data... |
//! SHA-256 of everything before it
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::Model;
use crate::error::{format_err, Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VITA";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Serializes the config and every model tensor (running statistics
/// included) in construction order, as 32-bit floats.
pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let config = model.config().to_json();
    let entries = model.params().entries();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    file: &'b str,
}

impl<'b> Reader<'b> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        format_err(self.file, offset as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(
                self.pos,
                format!("truncated reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at + 4, format!("{what} is not UTF-8")))
    }
}

/// Parses checkpoint bytes; `file` names the source in error messages.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8], file: &str) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0, file };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.err(0, format!("bad magic {magic:?}, expected \"VITA\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let config_at = r.pos;
    let config_json = r.string("config")?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| r.err(config_at + 4, format!("invalid config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| r.err(config_at + 4, format!("invalid config: {e}")))?;
    let mut model = Model::<T>::new(config)?;
    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != model.params().len() {
        return Err(r.err(
            count_at,
            format!("tensor count {count} does not match architecture ({})", model.params().len()),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_at = r.pos;
        let name = r.string("tensor name")?;
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| r.err(name_at, format!("unknown tensor {name:?}")))?;
        if std::mem::replace(&mut seen[id], true) {
            return Err(r.err(name_at, format!("duplicate tensor {name:?}")));
        }
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        let expected = model.params().get(id).shape().to_vec();
        if rank != expected.len() {
            return Err(r.err(rank_at, format!("tensor {name:?} has rank {rank}, expected {}", expected.len())));
        }
        for (i, &want) in expected.iter().enumerate() {
            let at = r.pos;
            let d = r.u64("dimension")?;
            if d != want as u64 {
                return Err(r.err(at, format!("tensor {name:?} dim {i} is {d}, expected {want}")));
            }
        }
        let n = model.params().get(id).numel();
        let raw = r.take(n * 4, "tensor data")?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        model.params_mut().replace(id, data)?;
    }
    let body_end = r.pos;
    let stored = r.take(DIGEST_LEN, "checksum")?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        return Err(r.err(body_end, "checksum mismatch: contents are corrupted"));
    }
    Ok(model)
}
