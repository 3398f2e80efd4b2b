//! Flat binary checkpoint: `"ACMN"`, `u32` version, then one record per
//! parameter: `u32` name length, name bytes, `u32` rank, `u32` dims, and the
//! little-endian `f32` payload. Records run to end of file.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACMN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + store.scalar_count() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Write atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store);
    atomic_write(path, |w| Ok(w.write_all(&bytes)?))
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.rest.len() < n {
            return None;
        }
        let (head, rest) = self.rest.split_at(n);
        self.rest = rest;
        Some(head)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<CheckpointRecord>> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let truncated = || bad("truncated checkpoint");
    let mut cur = Cursor { rest: bytes };
    if cur.take(4).ok_or_else(truncated)? != CHECKPOINT_MAGIC {
        return Err(bad("missing ACMN magic"));
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while !cur.rest.is_empty() {
        let name_len = cur.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(cur.take(name_len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| bad("parameter name is not utf-8"))?;
        let rank = cur.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 4).ok_or_else(truncated)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(CheckpointRecord { name, shape, data });
    }
    Ok(records)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, path)
}

impl<T: Scalar> ParamStore<T> {
    /// Overwrite parameter values from checkpoint records. Records must match
    /// the store one-to-one by name and shape; the first mismatch is reported.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        let ids: Vec<_> = self.iter().map(|(id, _)| id).collect();
        for (i, &id) in ids.iter().enumerate() {
            let p = self.get(id);
            let Some(r) = records.get(i) else {
                return Err(Error::Checkpoint {
                    name: p.name.clone(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if r.name != p.name {
                return Err(Error::Checkpoint {
                    name: p.name.clone(),
                    detail: format!("checkpoint has `{}` in this position", r.name),
                });
            }
            if r.shape != p.tensor.shape() {
                return Err(Error::Checkpoint {
                    name: p.name.clone(),
                    detail: format!("shape {:?} in checkpoint, {:?} in model", r.shape, p.tensor.shape()),
                });
            }
        }
        if let Some(extra) = records.get(ids.len()) {
            return Err(Error::Checkpoint {
                name: extra.name.clone(),
                detail: "not present in model".into(),
            });
        }
        for (&id, r) in ids.iter().zip(records) {
            let data = r.data.iter().map(|&v| T::of(v as f64)).collect();
            self.get_mut(id).tensor = Tensor::new(r.shape.clone(), data)?;
        }
        Ok(())
    }
}
