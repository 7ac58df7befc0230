//! Binary tensor files: 8-byte magic `SVDDIPT1`, a precision byte (bytes per
//! element, 4 or 8), a rank byte, `rank` little-endian `u32` dims, then the
//! little-endian payload.

use std::fs;
use std::path::Path;

use super::{Precision, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"SVDDIPT1";

/// A tensor read from disk in whichever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact when widening or matching).
    pub fn into_tensor<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.rank() > u8::MAX as usize {
            return Err(Error::invalid(format!("rank {} too large for file format", self.rank())));
        }
        let elem = T::PRECISION.flag() as usize;
        let mut out = Vec::with_capacity(10 + 4 * self.rank() + elem * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(T::PRECISION.flag());
        out.push(self.rank() as u8);
        for &d in self.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut out);
        }
        Ok(out)
    }
}

fn decode<T: Real>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let elem = T::PRECISION.flag() as usize;
    let data = payload.chunks_exact(elem).map(T::read_le).collect();
    Tensor::new(shape, data)
}

impl AnyTensor {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::format("tensor file", detail);
        if bytes.len() < 10 || &bytes[..8] != TENSOR_MAGIC {
            return Err(bad("missing SVDDIPT1 magic".into()));
        }
        let precision = Precision::from_flag(bytes[8])
            .ok_or_else(|| bad(format!("unknown precision flag {}", bytes[8])))?;
        let rank = bytes[9] as usize;
        let header = 10 + 4 * rank;
        if bytes.len() < header {
            return Err(bad("truncated shape header".into()));
        }
        let shape: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count: usize = shape.iter().product();
        let payload = &bytes[header..];
        let elem = precision.flag() as usize;
        if payload.len() != count * elem {
            return Err(bad(format!(
                "payload has {} bytes, shape {shape:?} needs {}",
                payload.len(),
                count * elem
            )));
        }
        let parsed = match precision {
            Precision::F32 => decode::<f32>(shape, payload).map(AnyTensor::F32),
            Precision::F64 => decode::<f64>(shape, payload).map(AnyTensor::F64),
        };
        parsed.map_err(|e| bad(e.to_string()))
    }
}

pub fn write_tensor_file<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AnyTensor::from_bytes(&bytes)
}
