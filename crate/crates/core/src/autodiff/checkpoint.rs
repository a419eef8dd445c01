//! Flat parameter files: 8-byte magic, `N_P` as u64, layout hash as u64,
//! then `N_P` little-endian f64 values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linops::Vector;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"KKTPARM1";
const HEADER_LEN: usize = 24;

pub fn encode_checkpoint(w: &Vector, layout_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * w.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    out.extend_from_slice(&layout_hash.to_le_bytes());
    for x in w.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Returns the parameters and the stored layout hash.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(Vector, u64), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err("wrong magic".into());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8-byte slice"));
    let n = word(8) as usize;
    let hash = word(16);
    let body = &bytes[HEADER_LEN..];
    if Some(body.len()) != n.checked_mul(8) {
        return Err(format!("header declares {n} parameters but the body holds {} bytes", body.len()));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let w = Vector::new(values).map_err(|_| "non-finite parameter".to_string())?;
    Ok((w, hash))
}

pub fn write_checkpoint(path: &Path, w: &Vector, layout_hash: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(w, layout_hash))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, rejecting it if `expected_hash` is given and differs.
pub fn read_checkpoint(path: &Path, expected_hash: Option<u64>) -> Result<(Vector, u64)> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let (w, hash) = decode_checkpoint(&bytes).map_err(bad)?;
    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(bad(format!("layout hash {hash:#018x} does not match {expected:#018x}")));
        }
    }
    Ok((w, hash))
}
