//! Checkpoint container: 8-byte magic `MXSEG001`, a little-endian u64 length
//! prefix, a JSON header mapping tensor names to `{shape, dtype, byte-offset}`,
//! then raw little-endian payloads in header order. Offsets are relative to
//! the start of the payload section.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MXSEG001";

#[derive(Debug, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    #[serde(rename = "byte-offset")]
    pub byte_offset: u64,
}

pub fn save<T: Scalar>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let mut header = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    for (name, t) in entries {
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
    }
    let mut offset = 0u64;
    for (name, t) in &tensors {
        header.insert(
            name.clone(),
            HeaderEntry { shape: t.shape().to_vec(), dtype: T::DTYPE, byte_offset: offset },
        );
        offset += (t.numel() * T::DTYPE.size_bytes()) as u64;
    }
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut write = |buf: &[u8]| -> Result<()> {
        f.write_all(buf).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(MAGIC)?;
    write(&(header_json.len() as u64).to_le_bytes())?;
    write(&header_json)?;
    for t in tensors.values() {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
        write(&payload)?;
    }
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;

    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let payload = &bytes[16 + hlen..];

    let mut out = BTreeMap::new();
    for (name, entry) in header {
        if entry.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has dtype {:?}, expected {:?}",
                entry.dtype,
                T::DTYPE
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let sz = T::DTYPE.size_bytes();
        let start = entry.byte_offset as usize;
        let end = start + numel * sz;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {name:?} payload out of bounds")));
        }
        let data: Vec<T> =
            payload[start..end].chunks_exact(sz).map(|c| T::from_le_slice(c)).collect();
        out.insert(name, Tensor::from_vec(&entry.shape, data));
    }
    Ok(out)
}
