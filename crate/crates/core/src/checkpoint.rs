//! `STC1` named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STC1"                      magic, 4 bytes
//! u32                         entry count
//! per entry:
//!   u16 name length, name bytes (UTF-8)
//!   u8 dtype (0 = f32, 1 = f64)
//!   u8 ndim, ndim × u64 dims
//! payloads                    row-major, concatenated in entry order
//! u32 meta length, meta       UTF-8 JSON object of strings (length 0 = no meta)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"STC1";
pub const FORMAT_VERSION: &str = "1";
pub const MAX_NAME_LEN: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(data))
    }

    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Tensor { shape, data };
        if t.numel() != t.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {:?} holds {} values",
                t.shape,
                t.len()
            )));
        }
        Ok(t)
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn all_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Ordered map of named tensors plus a string metadata map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > MAX_NAME_LEN {
            return Err(Error::invalid(format!(
                "tensor name longer than {MAX_NAME_LEN} bytes"
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        if tensor.numel() != tensor.len() {
            return Err(Error::invalid(format!("tensor `{name}` length mismatch")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.insert(
            name,
            Tensor::f64(vec![m.rows(), m.cols()], m.data().to_vec())?,
        )
    }

    /// Stores a rank-1 tensor.
    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.insert(name, Tensor::f64(vec![v.len()], v.to_vec())?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// A rank-2 tensor as a matrix; rank-1 tensors come back as one row.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        let (rows, cols) = match t.shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => {
                return Err(Error::Malformed(format!(
                    "`{name}` has shape {:?}, expected a matrix",
                    t.shape
                )))
            }
        };
        Matrix::from_vec(rows, cols, t.to_f64())
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 1 {
            return Err(Error::Malformed(format!(
                "`{name}` has shape {:?}, expected a vector",
                t.shape
            )));
        }
        Ok(t.to_f64())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.entries {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let meta = if self.meta.is_empty() {
            String::new()
        } else {
            serde_json::to_string(&self.meta).expect("string map serializes")
        };
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_tag(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Malformed("dim overflow".into()))?);
            }
            headers.push((name, dtype, shape));
        }
        let mut ckpt = Checkpoint::new();
        for (name, dtype, shape) in headers {
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("`{name}` is too large")))?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Malformed(format!("`{name}` is too large")))?;
            let raw = r.take(nbytes)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            let tensor = Tensor { shape, data };
            if !tensor.all_finite() {
                return Err(Error::NonFinite(format!("tensor `{name}`")));
            }
            ckpt.insert(name, tensor)?;
        }
        let meta_len = r.u32()? as usize;
        let meta_raw = r.take(meta_len)?;
        if meta_len > 0 {
            let text = std::str::from_utf8(meta_raw)
                .map_err(|_| Error::Malformed("meta is not UTF-8".into()))?;
            ckpt.meta = serde_json::from_str(text)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after meta",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
