//! Binary tensor container.
//!
//! Layout: `b"DARP"`, format version (u32 LE), JSON header length (u64 LE),
//! JSON header, then the little-endian f32 payload. The header maps every
//! tensor name to `{dtype, shape, byte_offset}` (offset relative to the start
//! of the payload); a reserved `__metadata__` key holds string metadata.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DARP";
pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn insert_params<T: Scalar>(&mut self, params: &ParamSet<T>) {
        for p in params.iter() {
            self.insert(p.name.clone(), p.value.cast());
        }
    }

    /// Overwrite every entry of `params` from the tensor of the same name.
    pub fn load_params<T: Scalar>(&self, params: &mut ParamSet<T>) -> Result<()> {
        for p in params.iter_mut() {
            let t = self.tensor(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
            p.grad.fill(T::zero());
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = serde_json::Map::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let entry = Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += 4 * t.len() as u64;
        }
        header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        let header = serde_json::to_vec(&header)?;

        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated container: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(fmt)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(fmt)?;
        let header_len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(fmt)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(fmt)?;

        let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&header)?;
        let mut ck = Checkpoint::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                ck.metadata = serde_json::from_value(value)?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value)?;
            if entry.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor `{name}` has unsupported dtype {}",
                    entry.dtype
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.byte_offset as usize;
            let end = start + 4 * n;
            let bytes = payload.get(start..end).ok_or_else(|| {
                Error::Format(format!("tensor `{name}` extends past the payload"))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.tensors.insert(name, Tensor::new(entry.shape, data)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
