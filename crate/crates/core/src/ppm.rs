//! Binary PPM (P6, maxval 255) reader/writer for 8-bit image interchange.
//!
//! Float tensors quantize to bytes with round-to-nearest on write, so writing
//! is lossy; the byte-level decode/encode roundtrip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encode an H x W x 3 tensor as P6 bytes, clamping values into [0,1] and
/// quantizing with round(v * 255).
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "ppm needs 3 channels, got {c}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in img.data() {
        out.push((v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Decode P6 bytes into an H x W x 3 tensor with values in [0,1].
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Format(format!(
            "bad ppm magic {:?}, expected P6",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = parse_dim(next_token(bytes, &mut pos)?)?;
    let h = parse_dim(next_token(bytes, &mut pos)?)?;
    let maxval = parse_dim(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator after ppm header".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != h * w * 3 {
        return Err(Error::Format(format!(
            "ppm payload is {} bytes, expected {}",
            payload.len(),
            h * w * 3
        )));
    }
    let data = payload
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[h, w, 3], data)
}

/// Next whitespace-delimited token, skipping `#` comment lines.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated ppm header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Format(format!(
                "bad ppm header token {:?}",
                String::from_utf8_lossy(token)
            ))
        })
}

pub fn save_ppm<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn load_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?)
}
