//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "GSAI"            4 bytes magic
//! version           u32
//! config digest     32 bytes, SHA-256 of the config JSON below
//! config length     u64, then that many bytes of UTF-8 JSON
//! step              u64
//! tensor count      u32
//! per tensor        u32 name length, name, u32 rank, u64 per dim, f64 per value
//! moments           first moments then second moments, each in the tensor
//!                   layout above and in parameter order
//! adam step         u64
//! history length    u64, then that many bytes of UTF-8 JSON
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamState, Checkpoint, ConfigSet, MetricHistory};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GSAI";
pub const VERSION: u32 = 1;

pub fn config_digest(json: &[u8]) -> [u8; 32] {
    Sha256::digest(json).into()
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&ckpt.configs)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(config_digest(&config));
    out.extend((config.len() as u64).to_le_bytes());
    out.extend(&config);
    out.extend((ckpt.step as u64).to_le_bytes());
    let entries = ckpt.params.entries();
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t, _) in &entries {
        put_tensor(&mut out, name, t);
    }
    for (moments, prefix) in [(&ckpt.adam.m, "m"), (&ckpt.adam.v, "v")] {
        for ((name, _, _), t) in entries.iter().zip(moments) {
            put_tensor(&mut out, &format!("{prefix}.{name}"), t);
        }
    }
    out.extend(ckpt.adam.t.to_le_bytes());
    let history = serde_json::to_vec(&ckpt.history)?;
    out.extend((history.len() as u64).to_le_bytes());
    out.extend(&history);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        let n = self.u64(what)?;
        if n > self.buf.len() as u64 {
            return Err(Error::Truncated(what));
        }
        Ok(n as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32("tensor name")? as usize;
        let name = String::from_utf8(self.take(n, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64("tensor shape")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c <= self.buf.len() / 8)
            .ok_or(Error::Truncated("tensor data"))?;
        let data = self
            .take(count * 8, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let n = r.len("config")?;
    let config = r.take(n, "config")?;
    if config_digest(config) != digest {
        return Err(Error::DigestMismatch);
    }
    let configs: ConfigSet = serde_json::from_slice(config)?;
    let step = r.u64("step")? as usize;

    let mut params: ModelParams = init_params(&configs.model)?;
    let count = r.u32("tensor count")? as usize;
    let expected = params.entries().len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} tensors stored, model has {expected}")));
    }
    let read_into = |r: &mut Reader<'_>, prefix: &str| -> Result<Vec<Tensor>> {
        params
            .entries()
            .iter()
            .map(|(name, slot, _)| {
                let (stored, t) = r.tensor()?;
                let want = if prefix.is_empty() {
                    name.clone()
                } else {
                    format!("{prefix}.{name}")
                };
                if stored != want || t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "expected `{want}` {:?}, found `{stored}` {:?}",
                        slot.shape(),
                        t.shape()
                    )));
                }
                Ok(t)
            })
            .collect()
    };
    let values = read_into(&mut r, "")?;
    let m = read_into(&mut r, "m")?;
    let v = read_into(&mut r, "v")?;
    for ((_, slot, _), t) in params.entries_mut().into_iter().zip(values) {
        *slot = t;
    }
    let t = r.u64("adam step")?;
    let n = r.len("history")?;
    let history: MetricHistory = serde_json::from_slice(r.take(n, "history")?)?;
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(Checkpoint {
        configs,
        params,
        adam: AdamState { m, v, t },
        step,
        history,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
