//! The GT01 tensor container.
//!
//! ```text
//! offset 0      b"GT01"
//! offset 4      u32 LE rank
//! offset 8      rank × u32 LE dims
//! offset 8+4r   row-major f32 LE payload
//! ```
//!
//! Tensors are always written with rank 4. Files of rank 1..=4 are accepted and
//! left-padded with unit dimensions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"GT01";

/// Byte order of a (possibly simulated) host's native `f32`/`u32` memory layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HostOrder {
    Little,
    Big,
}

impl HostOrder {
    pub fn native() -> Self {
        if cfg!(target_endian = "big") {
            HostOrder::Big
        } else {
            HostOrder::Little
        }
    }
}

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    encode_from_host(t, HostOrder::native())
}

/// Encodes as a host with byte order `host` would: the native in-memory bytes
/// of every word are swapped to little-endian before being written.
pub fn encode_from_host(t: &Tensor<f32>, host: HostOrder) -> Vec<u8> {
    let native_u32 = |v: u32| match host {
        HostOrder::Little => v.to_le_bytes(),
        HostOrder::Big => v.to_be_bytes(),
    };
    let to_le = |mut b: [u8; 4]| {
        if host == HostOrder::Big {
            b.reverse();
        }
        b
    };
    let dims = t.shape().dims();
    let mut out = Vec::with_capacity(8 + 16 + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&to_le(native_u32(dims.len() as u32)));
    for d in dims {
        out.extend_from_slice(&to_le(native_u32(d as u32)));
    }
    for v in t.data() {
        out.extend_from_slice(&to_le(native_u32(v.to_bits())));
    }
    out
}

fn word(bytes: &[u8], offset: usize, context: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            context: context.to_string(),
            offset,
            reason: "unexpected end of data".into(),
        })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    decode_named(bytes, "GT01")
}

pub fn decode_named(bytes: &[u8], context: &str) -> Result<Tensor<f32>> {
    let fail = |offset: usize, reason: String| Error::Format {
        context: context.to_string(),
        offset,
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "missing GT01 magic".into()));
    }
    let rank = word(bytes, 4, context)? as usize;
    if !(1..=4).contains(&rank) {
        return Err(fail(4, format!("unsupported rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        dims[4 - rank + i] = word(bytes, 8 + 4 * i, context)? as usize;
    }
    let shape = Shape::from_dims(&dims)?;
    let start = 8 + 4 * rank;
    let expected = shape
        .numel()
        .checked_mul(4)
        .ok_or_else(|| fail(8, "dimensions overflow".into()))?;
    let payload = bytes.len().saturating_sub(start);
    if payload != expected {
        return Err(fail(
            start + payload.min(expected),
            format!("payload has {payload} bytes, shape {shape} needs {expected}"),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    super::write_atomic(path, &encode(t))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = super::read_bytes(path)?;
    decode_named(&bytes, &path.display().to_string())
}
