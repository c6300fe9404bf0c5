//! Portable tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"GGTA"
//! version  u32 (= 1)
//! mlen     u64   length of the manifest in bytes
//! manifest UTF-8 JSON {"records": [{name, dtype, shape, offset, nbytes}], "metadata": {..}}
//! payload  concatenated little-endian element data; offsets are relative to payload start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::{DType, Float, Tensor};

const MAGIC: &[u8; 4] = b"GGTA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    records: Vec<RecordEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Named tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    records: Vec<(String, AnyTensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Float>(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.records.push((name.into(), T::wrap(tensor)));
    }

    pub fn push_any(&mut self, name: impl Into<String>, tensor: AnyTensor) {
        self.records.push((name.into(), tensor));
    }

    pub fn records(&self) -> &[(String, AnyTensor)] {
        &self.records
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn get<T: Float>(&self, name: &str) -> Result<&Tensor<T>> {
        let (_, any) = self
            .records
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| TensorError::Archive(format!("no record named `{name}`")))?;
        T::unwrap_any(any).ok_or_else(|| {
            TensorError::Archive(format!(
                "record `{name}` has dtype {:?}, expected {:?}",
                any.dtype(),
                T::DTYPE
            ))
        })
    }

    /// All records with the given name prefix, prefix stripped, in archive order.
    pub fn with_prefix<T: Float>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.records
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
            .map(|(rest, any)| {
                T::unwrap_any(any)
                    .cloned()
                    .map(|t| (rest.to_string(), t))
                    .ok_or_else(|| TensorError::Archive(format!("record `{prefix}{rest}` has wrong dtype")))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.records.len());
        for (name, t) in &self.records {
            let offset = payload.len() as u64;
            t.write_payload(&mut payload);
            entries.push(RecordEntry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            records: entries,
            metadata: self.metadata.clone(),
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Archive(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::Archive(format!("unsupported archive version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
            .map_err(|e| TensorError::Archive(format!("manifest: {e}")))?;
        let payload = &bytes[manifest_end..];
        let mut records = Vec::with_capacity(manifest.records.len());
        for e in manifest.records {
            let n: usize = e.shape.iter().product();
            let expected = n * e.dtype.size();
            if e.nbytes as usize != expected {
                return Err(TensorError::Archive(format!(
                    "record `{}`: {} bytes for shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            let start = e.offset as usize;
            let chunk = payload
                .get(start..start + expected)
                .ok_or_else(|| TensorError::Archive(format!("record `{}` out of bounds", e.name)))?;
            let t = match e.dtype {
                DType::F32 => AnyTensor::F32(decode::<f32>(e.shape, chunk)?),
                DType::F64 => AnyTensor::F64(decode::<f64>(e.shape, chunk)?),
            };
            records.push((e.name, t));
        }
        Ok(Self {
            records,
            metadata: manifest.metadata,
        })
    }

    /// Write via a temporary sibling and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode<T: Float>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    Tensor::new(shape, bytes.chunks_exact(size).map(T::read_le).collect())
}

/// Write `bytes` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().and_then(|e| e.to_str()).map(|e| format!("{e}.")).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(TensorArchive::from_bytes(b"nope").is_err());
        assert!(TensorArchive::from_bytes(b"GGTA\x02\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn dtype_checked_on_get() {
        let mut a = TensorArchive::new();
        a.push("w", Tensor::<f32>::ones(vec![2]));
        let b = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
        assert!(b.get::<f32>("w").is_ok());
        assert!(b.get::<f64>("w").is_err());
        assert!(b.get::<f32>("missing").is_err());
    }
}
