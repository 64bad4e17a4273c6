//! The `SDTF` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "SDTF"
//! version  u16            (currently 1)
//! count    u16
//! count × {
//!     name_len u16, name (UTF-8)
//!     rank     u8, dims (u32 × rank)
//!     dtype    u8        (1 = f32, 2 = f64)
//!     payload  product(dims) × size_of(dtype), row-major
//! }
//! ```
//!
//! String metadata (config digests, adapter kind) is carried as zero-length
//! rank-1 tensors named `meta/<key>=<value>`, so files stay readable by any
//! reader of the plain format.

use std::path::Path;

use ndarray::{Array, ArrayD, Dimension, IxDyn};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDTF";
pub const VERSION: u16 = 1;
const META_PREFIX: &str = "meta/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    /// Values widened to f64. For `F32` tensors every value is exactly
    /// representable in f32, so writing back is bit-exact.
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.data.clone()).expect("dims validated on construction")
    }

    /// Converts to a fixed-rank array, failing on a rank mismatch.
    pub fn to_array_of<D: Dimension>(&self) -> Result<Array<f64, D>> {
        self.to_array()
            .into_dimensionality::<D>()
            .map_err(|_| Error::Shape(format!("tensor `{}` has rank {}", self.name, self.dims.len())))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f64>, dtype: DType) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor name too long".into()));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!("tensor `{name}` has unrepresentable dims")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}`: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        let data = match dtype {
            DType::F64 => data,
            DType::F32 => data.into_iter().map(|v| v as f32 as f64).collect(),
        };
        self.tensors.push(NamedTensor {
            name: name.to_owned(),
            dims: dims.to_vec(),
            dtype,
            data,
        });
        Ok(())
    }

    pub fn push_array<D: Dimension>(&mut self, name: &str, array: &Array<f64, D>) -> Result<()> {
        let data = array.iter().copied().collect();
        self.push(name, array.shape(), data, DType::F64)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if key.contains('=') {
            return Err(Error::Format(format!("metadata key `{key}` contains '='")));
        }
        let prefix = format!("{META_PREFIX}{key}=");
        self.tensors.retain(|t| !t.name.starts_with(&prefix));
        self.push(&format!("{prefix}{value}"), &[0], Vec::new(), DType::F64)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        let prefix = format!("{META_PREFIX}{key}=");
        self.tensors.iter().find_map(|t| t.name.strip_prefix(&prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.tensors.len() > u16::MAX as usize {
            return Err(Error::Format("too many tensors".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u16).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(t.dtype.tag());
            match t.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in &t.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| Error::Format("missing header".into()))?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u16().ok_or_else(|| Error::Format("missing version".into()))?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u16().ok_or_else(|| Error::Format("missing tensor count".into()))?;

        let mut file = TensorFile::new();
        for index in 0..count {
            let header_err = || Error::Format(format!("truncated header for tensor #{index}"));
            let name_len = r.u16().ok_or_else(header_err)? as usize;
            let name = r.take(name_len).ok_or_else(header_err)?;
            let name = std::str::from_utf8(name)
                .map_err(|_| Error::Format(format!("tensor #{index} name is not UTF-8")))?
                .to_owned();
            let rank = r.u8().ok_or_else(header_err)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32().ok_or_else(header_err)? as usize);
            }
            let tag = r.u8().ok_or_else(header_err)?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` has unknown dtype tag {tag}")))?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dims overflow")))?;
            let expected = count
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dims overflow")))?;
            let payload = r.take(expected).ok_or_else(|| Error::Truncated {
                name: name.clone(),
                expected,
                found: r.remaining(),
            })?;
            let data = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if file.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            file.tensors.push(NamedTensor {
                name,
                dims,
                dtype,
                data,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
