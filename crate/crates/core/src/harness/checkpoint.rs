//! Versioned, checksummed binary snapshots.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, 32-byte
//! SHA-256 of the payload, then the bincode payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"FORESGT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint payload fails its checksum")]
    CorruptBlob,
    #[error("checkpoint encoding: {0}")]
    Encoding(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode<S: Serialize>(state: &S) -> Result<Vec<u8>, CheckpointError> {
    let payload = bincode::serialize(state).map_err(|e| CheckpointError::Encoding(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<S: DeserializeOwned>(blob: &[u8]) -> Result<S, CheckpointError> {
    if blob.len() < HEADER || &blob[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let found = u32::from_le_bytes(blob[8..12].try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found, expected: FORMAT_VERSION });
    }
    let payload = &blob[HEADER..];
    if Sha256::digest(payload).as_slice() != &blob[12..HEADER] {
        return Err(CheckpointError::CorruptBlob);
    }
    bincode::deserialize(payload).map_err(|e| CheckpointError::Encoding(e.to_string()))
}

/// Writes through a temporary file so a crash never leaves a torn snapshot.
pub fn save<S: Serialize>(path: &Path, state: &S) -> Result<(), CheckpointError> {
    let blob = encode(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, blob)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<S: DeserializeOwned>(path: &Path) -> Result<S, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let state = (vec![1.5f32, -2.0], "x".to_string(), 7u64);
        let back: (Vec<f32>, String, u64) = decode(&encode(&state).unwrap()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut blob = encode(&42u32).unwrap();
        blob[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(decode::<u32>(&blob), Err(CheckpointError::VersionMismatch { found, .. }) if found == FORMAT_VERSION + 1));
    }

    #[test]
    fn flipped_bit_is_rejected() {
        let mut blob = encode(&vec![0u8; 64]).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 1;
        assert!(matches!(decode::<Vec<u8>>(&blob), Err(CheckpointError::CorruptBlob)));
        let mut blob = encode(&vec![0u8; 64]).unwrap();
        blob[20] ^= 0x80;
        assert!(matches!(decode::<Vec<u8>>(&blob), Err(CheckpointError::CorruptBlob)));
        assert!(matches!(decode::<Vec<u8>>(b"short"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &vec![3u16, 4]).unwrap();
        assert_eq!(load::<Vec<u16>>(&path).unwrap(), vec![3, 4]);
    }
}
