//! The "OTNS v1" named tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"OTNS" | u32 version (=1) | u32 ndim | ndim x u32 dims | u32 dtype (0 = f32)
//! | row-major f32 payload | u32 name length | UTF-8 name
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array, ArrayView, Dimension, IxDyn};
use thiserror::Error;

use crate::error::{IoContext, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"OTNS";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OtnsError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    VersionMismatch(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("trailing bytes after channel name ({0})")]
    TrailingBytes(usize),
    #[error("channel name is not valid UTF-8")]
    InvalidName,
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("dims {dims:?} do not match {len} payload values")]
    DimsMismatch { dims: Vec<usize>, len: usize },
}

/// A named float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self, OtnsError> {
        let len = dims.iter().product::<usize>();
        if len != data.len() {
            return Err(OtnsError::DimsMismatch { dims, len: data.len() });
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }

    pub fn from_array<T: Scalar, D: Dimension>(name: impl Into<String>, a: ArrayView<'_, T, D>) -> Self {
        Self {
            name: name.into(),
            dims: a.shape().to_vec(),
            data: a.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_array<T: Scalar>(&self) -> Array<T, IxDyn> {
        Array::from_shape_vec(
            IxDyn(&self.dims),
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("dims validated at construction")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, OtnsError> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(OtnsError::NonFinite(i));
        }
        let name = self.name.as_bytes();
        let mut out =
            Vec::with_capacity(16 + 4 * self.dims.len() + 4 * self.data.len() + 4 + name.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OtnsError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(OtnsError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(OtnsError::VersionMismatch(version));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let dtype = r.u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(OtnsError::UnsupportedDtype(dtype));
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let payload_len = count.and_then(|c| c.checked_mul(4)).ok_or(OtnsError::Truncated {
            section: "payload",
            needed: usize::MAX,
            available: bytes.len() - r.pos,
        })?;
        let payload = r.take(payload_len, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let name_len = r.u32("name length")? as usize;
        let name = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name)
            .map_err(|_| OtnsError::InvalidName)?
            .to_owned();
        if r.pos != bytes.len() {
            return Err(OtnsError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { name, dims, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], OtnsError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(OtnsError::Truncated {
                section,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, OtnsError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

pub fn write_tensor(t: &NamedTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    fs::write(path, bytes).at(path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<NamedTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    Ok(NamedTensor::from_bytes(&bytes)?)
}
