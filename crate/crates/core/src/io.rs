//! MRT1 tensor files and PGM previews.
//!
//! MRT1 layout: the 4-byte magic `MRT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{"dtype":"f32"|"f64","shape":[...]}`, then the raw
//! little-endian payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
}

pub fn encode_mrt1(t: &Tensor, dtype: DType) -> Vec<u8> {
    let header = serde_json::to_vec(&Header { dtype, shape: t.shape().to_vec() })
        .expect("header serializes");
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut buf = Vec::with_capacity(8 + header.len() + width * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for &v in t.data() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    buf
}

pub fn decode_mrt1(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing MRT1 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Format("truncated MRT1 header".into()))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| Error::Format(format!("bad MRT1 header: {e}")))?;
    let payload = &bytes[8 + hlen..];
    let n: usize = header.shape.iter().product();
    let data: Vec<f64> = match header.dtype {
        DType::F32 => {
            check_payload(payload.len(), n, 4)?;
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        DType::F64 => {
            check_payload(payload.len(), n, 8)?;
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
    };
    Tensor::new(header.shape, data)
}

fn check_payload(len: usize, n: usize, width: usize) -> Result<()> {
    if len != n * width {
        return Err(Error::Format(format!("payload has {len} bytes, expected {}", n * width)));
    }
    Ok(())
}

pub fn write_mrt1(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_mrt1_as(path, t, DType::F64)
}

pub fn write_mrt1_as(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_mrt1(t, dtype))?;
    Ok(())
}

pub fn read_mrt1(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_mrt1(&bytes)
}

/// Binary 8-bit PGM (P5, maxval 255). Values are clamped to [0, 1] and scaled.
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::dim("write_pgm", format!("{} values for {height}x{width}", values.len())));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

/// Interprets a float grid as integer labels, rejecting non-integral values.
pub fn as_labels(t: &Tensor) -> Result<Vec<i64>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v.is_finite() {
                Ok(v as i64)
            } else {
                Err(Error::Format(format!("label grid holds non-integer value {v}")))
            }
        })
        .collect()
}
