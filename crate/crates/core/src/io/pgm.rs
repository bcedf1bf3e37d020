//! Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).

use std::path::Path;

use crate::error::{Error, Result};

/// Quantises a value in `[0, 1]` with round-half-up.
pub fn quantize(u: f64) -> u16 {
    (u.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

pub fn encode(h: usize, w: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::invalid(format!(
            "PGM raster of {h}x{w} given {} samples",
            values.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for &v in values {
        out.extend_from_slice(&quantize(v as f64).to_be_bytes());
    }
    Ok(out)
}

/// Returns `(height, width, samples)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let fail = |offset: usize, reason: &str| Error::Format {
        context: "PGM16".into(),
        offset,
        reason: reason.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(fail(0, "expected P5 magic"));
    }
    let num = |(off, s): (usize, &str)| s.parse::<usize>().map_err(|_| fail(off, "bad header number"));
    let w = num(fields[1])?;
    let h = num(fields[2])?;
    if num(fields[3])? != 65535 {
        return Err(fail(fields[3].0, "maxval must be 65535"));
    }
    pos += 1;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != 2 * h * w {
        return Err(fail(pos, "sample count does not match header"));
    }
    let samples = body
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((h, w, samples))
}

pub fn write(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    super::write_atomic(path, &encode(h, w, values)?)
}
