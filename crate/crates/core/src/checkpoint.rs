//! Binary model checkpoints.
//!
//! ```text
//! "GRKN" | version: u32 LE | header_len: u32 LE | header (UTF-8 JSON) | payloads
//! ```
//!
//! The header lists every tensor's name, shape and dtype; payloads follow in
//! header order as little-endian row-major values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KatConfig, KatModel};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GRKN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorEntry {
    /// `None` when the size overflows `usize`.
    pub fn byte_len(&self) -> Option<usize> {
        self.shape
            .iter()
            .try_fold(self.dtype.size(), |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: KatConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode<T: Scalar>(model: &KatModel<T>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        tensors: model
            .named()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(format!("header: {e}")))?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| Error::format("header exceeds 4 GiB"))?;
    let payload: usize = header
        .tensors
        .iter()
        .filter_map(TensorEntry::byte_len)
        .sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.named() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::format("checkpoint truncated in preamble"))
}

fn read_tensor<T: Scalar>(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor<T>> {
    let data: Vec<T> = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

/// Parses a checkpoint. Values stored in another precision are converted
/// to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(KatModel<T>, Header)> {
    if bytes.get(..4) != Some(&MAGIC[..]) {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::format("checkpoint truncated in header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::format(format!("header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    let expected = header
        .tensors
        .iter()
        .try_fold(0usize, |acc, e| acc.checked_add(e.byte_len()?))
        .ok_or_else(|| Error::format("header describes an impossibly large payload"))?;
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload holds {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut at = 0;
    for e in &header.tensors {
        let len = e.byte_len().expect("checked above");
        named.push((
            e.name.clone(),
            read_tensor(&payload[at..at + len], &e.shape, e.dtype)?,
        ));
        at += len;
    }
    let model = KatModel::from_named(&header.config, named)?;
    Ok((model, header))
}

pub fn save<T: Scalar>(
    model: &KatModel<T>,
    metadata: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode(model, metadata)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(KatModel<T>, Header)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Reads only the header, e.g. to learn the stored precision.
pub fn peek_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut f = fs::File::open(path)?;
    let mut pre = [0u8; 12];
    f.read_exact(&mut pre)
        .map_err(|_| Error::format("checkpoint truncated in preamble"))?;
    if pre[..4] != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let mut json = vec![0u8; read_u32(&pre, 8)? as usize];
    f.read_exact(&mut json)
        .map_err(|_| Error::format("checkpoint truncated in header"))?;
    serde_json::from_slice(&json).map_err(|e| Error::format(format!("header: {e}")))
}
