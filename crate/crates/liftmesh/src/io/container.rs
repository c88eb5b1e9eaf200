//! Binary tensor container ("LMTC"): the checkpoint and body-asset format.
//!
//! Layout, all little-endian, strictly sequential with no padding:
//!
//! ```text
//! magic   4 bytes  "LMTC"
//! version u32      currently 1; unknown versions are refused
//! count   u64      number of entries
//! entry   repeated count times:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   0 = f64, 1 = i64
//!   rank     u32
//!   dims     rank × u64
//!   payload  product(dims) × 8 bytes
//! ```
//!
//! Entries are written sorted by name, so identical content always produces
//! byte-identical files. Reading consumes exactly the declared lengths and
//! never seeks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"LMTC";
pub const VERSION: u32 = 1;

/// One stored tensor: dense f64 (the common case) or i64 (indices, tree
/// structure, faces).
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64(Tensor),
    I64 { dims: Vec<usize>, data: Vec<i64> },
}

impl Entry {
    pub fn dims(&self) -> &[usize] {
        match self {
            Entry::F64(t) => t.dims(),
            Entry::I64 { dims, .. } => dims,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn as_f64(&self) -> Result<&Tensor> {
        match self {
            Entry::F64(t) => Ok(t),
            Entry::I64 { .. } => Err(Error::Format("expected f64 entry, found i64".into())),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match self {
            Entry::I64 { data, .. } => Ok(data),
            Entry::F64(_) => Err(Error::Format("expected i64 entry, found f64".into())),
        }
    }
}

/// Named tensors, ordered by name.
pub type TensorMap = BTreeMap<String, Entry>;

/// Serialize a map to container bytes.
pub fn to_bytes(map: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for (name, entry) in map {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match entry {
            Entry::F64(t) => {
                out.push(0);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.dims() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Entry::I64 { dims, data } => {
                out.push(1);
                out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for &d in dims {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated container while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Parse container bytes from any reader. Reads exactly the declared
/// lengths; trailing bytes in the stream are left untouched.
pub fn from_reader(r: &mut impl Read) -> Result<TensorMap> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = read_u64(r, "entry count")?;
    let mut map = TensorMap::new();
    for i in 0..count {
        let name_len = read_u32(r, &format!("entry {i} name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(r, &mut name_bytes, &format!("entry {i} name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?;
        let mut dtype = [0u8; 1];
        read_exact(r, &mut dtype, &format!("'{name}' dtype"))?;
        let rank = read_u32(r, &format!("'{name}' rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r, &format!("'{name}' dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * 8];
        read_exact(r, &mut payload, &format!("'{name}' payload"))?;
        let entry = match dtype[0] {
            0 => {
                let data: Vec<f64> = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Entry::F64(
                    Tensor::new(dims, data)
                        .map_err(|e| Error::Format(format!("'{name}': {e}")))?,
                )
            }
            1 => {
                let data: Vec<i64> = payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Entry::I64 { dims, data }
            }
            d => return Err(Error::Format(format!("'{name}': unknown dtype code {d}"))),
        };
        if map.insert(name.clone(), entry).is_some() {
            return Err(Error::Format(format!("duplicate entry name '{name}'")));
        }
    }
    Ok(map)
}

pub fn save_checkpoint(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    super::atomic_write(path.as_ref(), &to_bytes(map))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_reader(&mut bytes.as_slice())
}

/// Wrap plain f64 tensors as container entries.
pub fn from_f64_map(map: &BTreeMap<String, Tensor>) -> TensorMap {
    map.iter()
        .map(|(k, v)| (k.clone(), Entry::F64(v.clone())))
        .collect()
}

/// Extract the f64 entries with a given prefix into a plain tensor map.
pub fn f64_entries_with_prefix(map: &TensorMap, prefix: &str) -> BTreeMap<String, Tensor> {
    map.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .filter_map(|(k, v)| match v {
            Entry::F64(t) => Some((k.clone(), t.clone())),
            Entry::I64 { .. } => None,
        })
        .collect()
}

/// Store a small integer as a 1-element i64 entry.
pub fn scalar_i64(v: i64) -> Entry {
    Entry::I64 { dims: vec![1], data: vec![v] }
}

pub fn get_scalar_i64(map: &TensorMap, name: &str) -> Result<i64> {
    let e = map
        .get(name)
        .ok_or_else(|| Error::Format(format!("container missing entry '{name}'")))?;
    let d = e.as_i64()?;
    if d.len() != 1 {
        return Err(Error::Format(format!("'{name}' is not a scalar")));
    }
    Ok(d[0])
}

/// Store a string as an i64 byte sequence (container payloads are numeric).
pub fn string_entry(s: &str) -> Entry {
    Entry::I64 {
        dims: vec![s.len().max(1)],
        data: if s.is_empty() {
            vec![0]
        } else {
            s.bytes().map(|b| b as i64).collect()
        },
    }
}

pub fn get_string(map: &TensorMap, name: &str) -> Result<String> {
    let e = map
        .get(name)
        .ok_or_else(|| Error::Format(format!("container missing entry '{name}'")))?;
    let bytes: Vec<u8> = e
        .as_i64()?
        .iter()
        .filter(|&&v| v != 0)
        .map(|&v| v as u8)
        .collect();
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("'{name}' is not a string entry")))
}
