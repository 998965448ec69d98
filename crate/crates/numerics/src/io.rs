//! Raw tensor file format.
//!
//! ```text
//! "OEMT" | version: u16 | rank: u16 | dims: rank × u64 | dtype: u8 (0=f32, 1=f64) | payload
//! ```
//! All integers and the row-major payload are little-endian.

use std::io::{Read, Write};

use crate::error::{NumericsError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"OEMT";
pub const TENSOR_VERSION: u16 = 1;

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * t.rank() + t.numel() * S::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(S::DTYPE.tag());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NumericsError::Truncated,
        _ => NumericsError::Io(e),
    })
}

/// Reads one tensor, converting the stored dtype to `S` if needed.
pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(NumericsError::BadMagic);
    }
    let mut b2 = [0u8; 2];
    read_exact(r, &mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != TENSOR_VERSION {
        return Err(NumericsError::UnsupportedVersion(version));
    }
    read_exact(r, &mut b2)?;
    let rank = u16::from_le_bytes(b2) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag)?;
    let dtype = DType::from_tag(tag[0]).ok_or(NumericsError::BadDtype(tag[0]))?;
    let n = numel(&shape);
    let mut payload = vec![0u8; n * dtype.size()];
    read_exact(r, &mut payload)?;
    let data: Vec<S> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| S::from_f64(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}
