//! Binary container used for steering data (`ASMV1`), filter banks (`ASMF1`)
//! and network weights (`FTJW1`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        5 bytes ASCII
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! payload      f32 values until end of file
//! ```
//!
//! Complex payloads store interleaved `(re, im)` f32 pairs.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC_LEN: usize = 5;

pub fn encode<H: Serialize>(magic: &[u8; MAGIC_LEN], header: &H, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC_LEN + 4 + json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a container into its header and payload. `expected_values` is
/// derived from the header and must match the payload length exactly.
pub fn decode<H: DeserializeOwned>(
    magic: &[u8; MAGIC_LEN],
    bytes: &[u8],
    expected_values: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f32>)> {
    if bytes.len() < MAGIC_LEN + 4 {
        return Err(Error::Format("file shorter than the fixed preamble".into()));
    }
    if &bytes[..MAGIC_LEN] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..MAGIC_LEN]),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len =
        u32::from_le_bytes(bytes[MAGIC_LEN..MAGIC_LEN + 4].try_into().unwrap()) as usize;
    let body = &bytes[MAGIC_LEN + 4..];
    if body.len() < header_len {
        return Err(Error::Format("truncated header".into()));
    }
    let header: H = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &body[header_len..];
    let want = expected_values(&header)?;
    if payload.len() != want * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            want * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn push_complex(out: &mut Vec<f32>, z: Complex64) {
    out.push(z.re as f32);
    out.push(z.im as f32);
}

pub(crate) fn complex_at(values: &[f32], i: usize) -> Complex64 {
    Complex64::new(f64::from(values[2 * i]), f64::from(values[2 * i + 1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_lengths() {
        let bytes = encode(b"TEST1", &serde_json::json!({"n": 2}), &[1.0, 2.0]);
        let n = |h: &serde_json::Value| Ok(h["n"].as_u64().unwrap() as usize);
        let (h, v) = decode::<serde_json::Value>(b"TEST1", &bytes, n).unwrap();
        assert_eq!(h["n"], 2);
        assert_eq!(v, vec![1.0, 2.0]);
        assert!(decode::<serde_json::Value>(b"XXXX1", &bytes, n).is_err());
        assert!(decode::<serde_json::Value>(b"TEST1", &bytes[..bytes.len() - 1], n).is_err());
        assert!(decode::<serde_json::Value>(b"TEST1", &bytes[..7], n).is_err());
    }
}
