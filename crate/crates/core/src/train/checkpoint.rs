//! Binary parameter archive.
//!
//! Layout, all integers little-endian: magic `SSDT`, format version (u32),
//! tensor count (u32), then per tensor the name length (u32) and UTF-8 name,
//! rank (u32), each dimension (u64), a dtype code (u32, 1 = f32) and the raw
//! f32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"SSDT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

/// Named tensors in archive order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(tensors: IndexMap<String, Tensor<f32>>) -> Self {
        Self { tensors }
    }

    /// Snapshot of a model's parameters, narrowed to f32.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.tensors
    }

    /// Copies every archived tensor into the matching parameter of `model`.
    pub fn apply_to<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        if self.tensors.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors, model has {} parameters",
                self.tensors.len(),
                model.params().len()
            )));
        }
        for p in model.params_mut() {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("archive lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in the archive, {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&DTYPE_F32.to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = IndexMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = r.u32()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype code {dtype}")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
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
            .ok_or_else(|| Error::Checkpoint(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
