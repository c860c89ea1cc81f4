//! Binary model files.
//!
//! ```text
//! "MCL1" | u32 version | u32 n_landmarks | u32 D | u32 block_count
//! block_count x { u16 name_len | name (UTF-8) | u8 rank | u32 extents[rank] | f32 values }
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian; values are row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::LabelingPattern;
use crate::tensor::{Scalar, Tensor};

use super::{head_name, NetworkParams, NetworkSpec};

pub const MODEL_MAGIC: &[u8; 4] = b"MCL1";
pub const MODEL_VERSION: u32 = 1;

pub fn model_to_bytes<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let spec = params.spec();
    let tensors = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    for v in [
        MODEL_VERSION,
        spec.n_landmarks as u32,
        spec.feature_dim as u32,
        tensors.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_model<T: Scalar>(params: &NetworkParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(params))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetworkSpec, NetworkParams<f32>)> {
    let bytes = fs::read(path)?;
    model_from_bytes(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(NetworkSpec, NetworkParams<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic (expected \"MCL1\")".into(),
        });
    }
    if bytes.len() < 4 + 16 + 4 {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: "truncated header".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::Format {
            offset: body_len,
            msg: format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        });
    }

    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let n = r.u32("landmark count")? as usize;
    let pattern = LabelingPattern::from_count(n).map_err(|e| r.fail(8, e.to_string()))?;
    let d = r.u32("feature dim")? as usize;
    if d == 0 {
        return Err(r.fail(12, "feature dim is zero"));
    }
    let count = r.u32("block count")? as usize;

    let spec = NetworkSpec::with_feature_dim(pattern, d);
    let mut params = NetworkParams::<f32>::init(spec.clone(), 0);
    let mut seen = std::collections::BTreeSet::new();
    let mut heads: Vec<(usize, Tensor<f32>)> = vec![];
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("block name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| r.fail(start + 2, "block name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("extent")? as usize);
        }
        let numel: usize = dims.iter().product();
        if rank == 0 || numel == 0 {
            return Err(r.fail(start, format!("block `{name}` has invalid extents {dims:?}")));
        }
        let raw = r.take(numel * 4, "block values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(r.fail(start, format!("duplicate block `{name}`")));
        }
        let tensor = Tensor::from_vec(&dims, values)?;
        if let Some(idx) = name
            .strip_prefix("head.")
            .and_then(|s| s.strip_suffix(".W"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            heads.push((idx, tensor));
            continue;
        }
        let slot = params.named_tensor_mut(&name).ok_or_else(|| Error::Format {
            offset: start,
            msg: format!("unknown block `{name}`"),
        })?;
        if slot.dims() != tensor.dims() {
            return Err(Error::Format {
                offset: start,
                msg: format!(
                    "block `{name}` has dims {:?}, expected {:?}",
                    tensor.dims(),
                    slot.dims()
                ),
            });
        }
        *slot = tensor;
    }
    if r.pos != body_len {
        return Err(r.fail(r.pos, "trailing bytes after last block"));
    }
    let expected_shared = params.named_tensors().len() - params.heads().len();
    if seen.len() - heads.len() != expected_shared {
        return Err(r.fail(
            body_len,
            format!(
                "expected {expected_shared} shared blocks, found {}",
                seen.len() - heads.len()
            ),
        ));
    }
    heads.sort_by_key(|(i, _)| *i);
    if heads.is_empty() || heads.iter().enumerate().any(|(k, (i, _))| k != *i) {
        return Err(r.fail(
            body_len,
            format!(
                "prediction heads must be named {}..; found {:?}",
                head_name(0),
                heads.iter().map(|(i, _)| head_name(*i)).collect::<Vec<_>>()
            ),
        ));
    }
    params
        .set_heads(heads.into_iter().map(|(_, t)| t).collect())
        .map_err(|e| r.fail(body_len, e.to_string()))?;
    Ok((spec, params))
}
