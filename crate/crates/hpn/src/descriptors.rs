//! Descriptor matrices: `"HDSC" | u32 n | u32 d | n·d f32`, little-endian.

use std::path::Path;

use hybridnet_core::eval::DescriptorSet;
use hybridnet_core::model::Modality;

use crate::bytes::{read_file, write_file, Reader};
use crate::error::{HpnError, Result};

pub const MAGIC: &[u8; 4] = b"HDSC";

pub fn to_bytes(set: &DescriptorSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * set.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a descriptor file. The format carries no modality or source ids,
/// so rows are numbered from 0 and tagged with `modality`.
pub fn from_bytes(bytes: &[u8], path: &Path, modality: Modality) -> Result<DescriptorSet> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC, "descriptor")?;
    let n = r.u32("header")? as usize;
    let d = r.u32("header")? as usize;
    if d == 0 {
        return Err(HpnError::Malformed { path: path.into(), detail: "descriptor width 0".into() });
    }
    let raw = r.take(4 * n * d, || format!("{n} descriptors of width {d}"))?;
    if r.remaining() != 0 {
        return Err(HpnError::CountMismatch { path: path.into(), declared: n, actual: n + r.remaining().div_ceil(4 * d) });
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DescriptorSet::new(modality, d, data, (0..n as u64).collect())?)
}

pub fn save(path: &Path, set: &DescriptorSet) -> Result<()> {
    write_file(path, &to_bytes(set))
}

pub fn load(path: &Path, modality: Modality) -> Result<DescriptorSet> {
    from_bytes(&read_file(path)?, path, modality)
}
