//! Versioned binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "REPOCKPT"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON: {"format_version", "config", "meta"}
//! count    u32 LE   number of tensors
//! tensor*  name_len u32 | name | ndim u32 | dims u64* | values f32 LE (row-major)
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Model parameters are stored under their [`Model::params`] names. Extra
//! tensors (optimizer state) may follow under other names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"REPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: serde_json::Value,
    /// Tensors that are not model parameters, in file order.
    pub extra: Vec<(String, Tensor<f32>)>,
}

pub fn encode<F: Scalar>(
    model: &Model<F>,
    meta: &serde_json::Value,
    extra: &[(String, Tensor<f32>)],
) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        meta: meta.clone(),
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);

    let params = model.params().iter().map(|p| (p.name.clone(), p.value.cast::<f32>()));
    let all: Vec<(String, Tensor<f32>)> = params.chain(extra.iter().cloned()).collect();
    buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for (name, t) in &all {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch; file is corrupted".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = r.len()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = Model::<f32>::zeroed(header.config)?;

    let count = r.u32()? as usize;
    let mut seen = vec![false; model.params().len()];
    let mut extra = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflows".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        match model.params().iter().position(|p| p.name == name) {
            Some(i) => {
                let expected = model.params()[i].value.shape();
                if expected != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {name}: file has {:?}, config implies {expected:?}",
                        tensor.shape()
                    )));
                }
                model.params_mut()[i].value = tensor;
                seen[i] = true;
            }
            None => extra.push((name, tensor)),
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(Error::Checkpoint(format!(
            "missing parameter {}",
            model.params()[i].name
        )));
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
        extra,
    })
}

/// Write to a sibling temporary file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    meta: &serde_json::Value,
    extra: &[(String, Tensor<f32>)],
) -> Result<()> {
    write_atomic(path, &encode(model, meta, extra)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
