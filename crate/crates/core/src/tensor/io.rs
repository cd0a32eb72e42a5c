//! `.brxt` tensor files:
//! `"BRXT" | version u32 LE | dtype u8 | ndim u8 | dims u64 LE * ndim | scalars LE`.

use std::fs;
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BRXT";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor whose dtype is only known at runtime.
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
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn save_tensor<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if t.ndim() > u8::MAX as usize {
        return Err(Error::shape("too many dimensions for .brxt"));
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

fn decode_as<T: Real>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let truncated = |expected: usize| Error::TruncatedPayload {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 10 {
        return Err(truncated(10));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            version,
        });
    }
    let dtype = DType::from_code(bytes[8])
        .ok_or_else(|| Error::invalid(format!("unknown dtype code {} in {}", bytes[8], path.display())))?;
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
    let expected = numel
        .checked_mul(dtype.size())
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::PayloadMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_as(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_as(shape, payload)?),
    })
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a tensor and requires its stored dtype to be `T`.
pub fn load_tensor_as<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let any = load_tensor(path)?;
    let found = any.dtype();
    let mismatch = || Error::DType {
        expected: T::DTYPE.to_string(),
        found: found.to_string(),
    };
    match any {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
        _ => Err(mismatch()),
    }
}
