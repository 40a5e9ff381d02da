//! Versioned, checksummed checkpoint container for a [`Replica`].
//!
//! Layout: magic `RLABCKPT`, format version (u32 LE), SHA-256 of the run
//! configuration, payload length (u64 LE), JSON payload, then SHA-256 of all
//! preceding bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::replica::Replica;

pub const MAGIC: &[u8; 8] = b"RLABCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

pub fn encode_checkpoint(replica: &Replica) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(replica).map_err(|e| HarnessError::Runtime(format!("serializing checkpoint: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&replica.config().hash());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Replica> {
    let corrupt = |m: &str| HarnessError::CorruptCheckpoint(m.to_string());
    if bytes.len() < HEADER_LEN + 32 {
        return Err(corrupt("file is shorter than the header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(HarnessError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(HarnessError::Checksum);
    }
    let config_hash: [u8; 32] = body[12..44].try_into().expect("32 bytes");
    let len = u64::from_le_bytes(body[44..52].try_into().expect("8 bytes")) as usize;
    if body.len() != HEADER_LEN + len {
        return Err(corrupt("payload length does not match the header"));
    }
    let mut replica: Replica =
        serde_json::from_slice(&body[HEADER_LEN..]).map_err(|e| corrupt(&format!("payload: {e}")))?;
    if replica.config().hash() != config_hash {
        return Err(HarnessError::ConfigMismatch);
    }
    replica.restore()?;
    Ok(replica)
}

pub fn save_checkpoint(replica: &Replica, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(replica)?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Replica> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_checkpoint(&bytes)
}
