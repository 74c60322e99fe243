//! Versioned network checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "HYBN" | u16 version | u8 variant | u32 tensor count
//! per tensor: u8 rank | rank × u32 dims
//! all parameters as f32, tensors in storage order
//! optional: "NRM1" | f64 mean_x | f64 std_x | f64 mean_y | f64 std_y
//! ```
//!
//! The trailer carries the training-set normalization so evaluation and
//! matching see inputs scaled exactly as during training.

use std::path::Path;

use hybridnet_core::data::NormalizationStats;
use hybridnet_core::model::{BranchArch, HybridNetwork, Variant};
use hybridnet_core::{Scalar, Tensor};

use crate::bytes::{read_file, sha256_hex, write_file, Reader};
use crate::error::{HpnError, Result};

pub const MAGIC: &[u8; 4] = b"HYBN";
pub const VERSION: u16 = 1;
const NORM_MAGIC: &[u8; 4] = b"NRM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: HybridNetwork<f32>,
    pub stats: Option<NormalizationStats>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(net: &HybridNetwork<S>, stats: Option<NormalizationStats>) -> Self {
        Checkpoint { net: net.cast(), stats }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.net.tensors();
        let mut out = Vec::with_capacity(16 + 4 * self.net.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.net.variant().tag());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(s) = &self.stats {
            out.extend_from_slice(NORM_MAGIC);
            for v in [s.mean_x, s.std_x, s.mean_y, s.std_y] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint image. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC, "checkpoint")?;
        let version = r.u16("header")?;
        if version != VERSION {
            return Err(HpnError::UnsupportedVersion { path: path.into(), format: "checkpoint", version });
        }
        let tag = r.u8("header")?;
        let variant = Variant::from_tag(tag)
            .ok_or_else(|| HpnError::Malformed { path: path.into(), detail: format!("unknown variant tag {tag}") })?;
        let count = r.u32("header")? as usize;
        if count > 4096 {
            return Err(HpnError::ShapeMismatch { path: path.into(), detail: format!("{count} tensors declared") });
        }
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let rank = r.u8(&format!("shape table entry {i}"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&format!("shape table entry {i}"))? as usize);
            }
            shapes.push(dims);
        }
        // Three branches, two merge layers and, for softmax, three heads.
        let heads = if variant == Variant::Softmax { 6 } else { 0 };
        let per_branch = count.saturating_sub(4 + heads) / 3;
        let arch = BranchArch::infer(variant, &shapes[..per_branch])
            .filter(|a| HybridNetwork::<f32>::expected_shapes(variant, a) == shapes)
            .ok_or_else(|| HpnError::ShapeMismatch {
                path: path.into(),
                detail: format!("shape table does not describe a {} network", variant.name()),
            })?;
        let mut tensors = Vec::with_capacity(count);
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n, || format!("parameter tensor {i}"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        let stats = match r.remaining() {
            0 => None,
            _ => {
                r.magic(NORM_MAGIC, "normalization trailer")?;
                let v = [r.f64("trailer")?, r.f64("trailer")?, r.f64("trailer")?, r.f64("trailer")?];
                if r.remaining() != 0 {
                    return Err(HpnError::Malformed {
                        path: path.into(),
                        detail: format!("{} unexpected bytes after the trailer", r.remaining()),
                    });
                }
                Some(NormalizationStats::new(v[0], v[1], v[2], v[3])?)
            }
        };
        let net = HybridNetwork::from_tensors(variant, arch, tensors)?;
        Ok(Checkpoint { net, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Loads and checks the variant.
    pub fn load_expecting(path: &Path, expected: Variant) -> Result<Self> {
        let c = Self::load(path)?;
        if c.net.variant() != expected {
            return Err(HpnError::VariantMismatch { path: path.into(), expected, found: c.net.variant() });
        }
        Ok(c)
    }

    /// Content hash of the serialized checkpoint.
    pub fn id(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}
