//! Binarized token streams.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `ALMT` |
//! | 4     | format version (u32, currently 1) |
//! | 8     | vocabulary checksum (u64, first 8 bytes of SHA-256 of the vocabulary file) |
//! | 8     | token count (u64) |
//! | 4·n   | token ids (u32) |

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ALMT";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;

pub fn vocab_checksum(vocab: &Vocabulary) -> u64 {
    let digest = Sha256::digest(vocab.to_file_string().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn encode_stream(ids: &[u32], checksum: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * ids.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&checksum.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

/// Decodes a stream, checking it was written against a vocabulary with
/// `expected_checksum` when one is given.
pub fn decode_stream(bytes: &[u8], expected_checksum: Option<u64>) -> Result<Vec<u32>> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a binarized token stream".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported token stream version {version}")));
    }
    let checksum = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if let Some(expected) = expected_checksum {
        if checksum != expected {
            return Err(Error::Format(format!(
                "token stream vocabulary checksum {checksum:016x} does not match {expected:016x}"
            )));
        }
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[HEADER..];
    if body.len() != count * 4 {
        return Err(Error::Format(format!(
            "expected {count} ids, found {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_stream(path: &Path, ids: &[u32], vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, encode_stream(ids, vocab_checksum(vocab))).map_err(|e| Error::io(path, e))
}

pub fn read_stream(path: &Path, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stream(&bytes, Some(vocab_checksum(vocab)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_checks() {
        let bytes = encode_stream(&[1, 258], 0xABCD);
        assert_eq!(&bytes[..4], b"ALMT");
        assert_eq!(bytes.len(), 24 + 8);
        assert_eq!(&bytes[24..28], &[1, 0, 0, 0]);
        assert_eq!(&bytes[28..32], &[2, 1, 0, 0]);
        assert_eq!(decode_stream(&bytes, Some(0xABCD)).unwrap(), [1, 258]);
        assert!(decode_stream(&bytes, Some(1)).is_err());
        assert!(decode_stream(&bytes[..30], None).is_err());
    }
}
