//! Patch pair containers.
//!
//! ```text
//! "HPMD" | u16 version | u32 count | u16 H | u16 W
//! per record: H·W bytes X | H·W bytes Y | u8 label (1 = match)
//! ```

use std::path::Path;

use hybridnet_core::data::{Label, Patch, PatchPair};
use hybridnet_core::{PATCH_PIXELS, PATCH_SIZE};

use crate::bytes::{read_file, write_file, Reader};
use crate::error::{HpnError, Result};

pub const MAGIC: &[u8; 4] = b"HPMD";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2;
const RECORD_LEN: usize = 2 * PATCH_PIXELS + 1;

pub fn to_bytes(pairs: &[PatchPair]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + pairs.len() * RECORD_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(PATCH_SIZE as u16).to_le_bytes());
    out.extend_from_slice(&(PATCH_SIZE as u16).to_le_bytes());
    for p in pairs {
        out.extend_from_slice(p.x.pixels());
        out.extend_from_slice(p.y.pixels());
        out.push(p.label.is_match() as u8);
    }
    out
}

/// Parses a container; record `i` gets `source_id = i`.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<PatchPair>> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC, "patch container")?;
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(HpnError::UnsupportedVersion { path: path.into(), format: "patch container", version });
    }
    let count = r.u32("header")? as usize;
    let (h, w) = (r.u16("header")? as usize, r.u16("header")? as usize);
    if (h, w) != (PATCH_SIZE, PATCH_SIZE) {
        return Err(HpnError::Malformed {
            path: path.into(),
            detail: format!("patch size {h}x{w}, expected {PATCH_SIZE}x{PATCH_SIZE}"),
        });
    }
    let mut pairs = Vec::with_capacity(count.min(r.remaining() / RECORD_LEN));
    for i in 0..count {
        let rec = r.take(RECORD_LEN, || format!("record {i} of {count}"))?;
        let label = match rec[RECORD_LEN - 1] {
            0 => Label::NonMatch,
            1 => Label::Match,
            b => return Err(HpnError::Malformed { path: path.into(), detail: format!("record {i} has label byte {b}") }),
        };
        pairs.push(PatchPair {
            x: Patch::new(rec[..PATCH_PIXELS].to_vec())?,
            y: Patch::new(rec[PATCH_PIXELS..2 * PATCH_PIXELS].to_vec())?,
            label,
            source_id: i as u64,
        });
    }
    if r.remaining() != 0 {
        return Err(HpnError::CountMismatch {
            path: path.into(),
            declared: count,
            actual: count + r.remaining().div_ceil(RECORD_LEN),
        });
    }
    Ok(pairs)
}

pub fn save(path: &Path, pairs: &[PatchPair]) -> Result<()> {
    write_file(path, &to_bytes(pairs))
}

pub fn load(path: &Path) -> Result<Vec<PatchPair>> {
    from_bytes(&read_file(path)?, path)
}
