//! Shared on-disk container: one line of compact JSON, a newline, then a raw
//! little-endian payload whose length the header declares.
//!
//! Corpus, checkpoint, embedding-store and inversion-embedding files all use
//! this layout so external tooling can inspect any artifact with `head -1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Current container format version, shared by all artifact kinds.
pub const FORMAT_VERSION: u32 = 1;

/// Common envelope fields every header starts with.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Envelope {
    pub magic: String,
    pub version: u32,
    /// Exact payload length in bytes following the header newline.
    pub payload_len: u64,
}

/// Writes `header` (which must serialize its own `magic`/`version`/
/// `payload_len` envelope fields) followed by the payload.
pub fn write_container<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let json = serde_json::to_string(header)?;
    debug_assert!(!json.contains('\n'));
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    out.write_all(payload)?;
    out.flush()?;
    Ok(())
}

/// Reads a container, validating magic, version and payload length.
pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &str) -> Result<(H, Vec<u8>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format(format!(
                "{}: missing header terminator",
                path.display()
            )));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 64 << 20 {
            return Err(Error::Format(format!(
                "{}: header exceeds 64 MiB",
                path.display()
            )));
        }
    }
    let envelope: Envelope = serde_json::from_slice(&header_bytes).map_err(|e| {
        Error::Format(format!("{}: invalid header JSON: {e}", path.display()))
    })?;
    if envelope.magic != magic {
        return Err(Error::Format(format!(
            "{}: magic '{}' does not name a {} file",
            path.display(),
            envelope.magic,
            magic
        )));
    }
    if envelope.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: envelope.version,
            expected: FORMAT_VERSION,
        });
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() as u64 != envelope.payload_len {
        return Err(Error::Truncated {
            expected: envelope.payload_len,
            found: payload.len() as u64,
        });
    }
    let header: H = serde_json::from_slice(&header_bytes)?;
    Ok((header, payload))
}

/// Serializes `[f32]` as little-endian bytes.
pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses little-endian `f32` values; errors if the byte count is not a
/// multiple of four.
pub fn f32_from_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Corruption(format!(
            "f32 payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serializes `[u16]` as little-endian bytes.
pub fn u16_bytes(values: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses little-endian `u16` values.
pub fn u16_from_bytes(bytes: &[u8]) -> Result<Vec<u16>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Corruption(format!(
            "u16 payload length {} is not a multiple of 2",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}
