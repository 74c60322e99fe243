//! PGM images, image-pair manifests and lattice extraction over them.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hybridnet_core::data::{extract_lattice_pairs, make_negatives, DatasetSplit, GrayImage, PatchPair};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{HpnError, Result};

/// Reads a binary (P5) 8-bit PGM.
pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| HpnError::io(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(HpnError::BadMagic {
            path: path.into(),
            expected: "binary PGM (P5)",
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| HpnError::Malformed { path: path.into(), detail: e.to_string() })?;
    if img.color() != image::ColorType::L8 {
        return Err(HpnError::Malformed { path: path.into(), detail: format!("{:?} pixels, expected 8-bit gray", img.color()) });
    }
    let g = img.into_luma8();
    let (w, h) = g.dimensions();
    Ok(GrayImage::new(w as usize, h as usize, g.into_raw())?)
}

pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let f = File::create(path).map_err(|e| HpnError::io(path, e))?;
    PnmEncoder::new(BufWriter::new(f))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.data(), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| HpnError::Malformed { path: path.into(), detail: e.to_string() })
}

/// One row of a manifest, with paths resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePairEntry {
    pub line: usize,
    pub x: PathBuf,
    pub y: PathBuf,
}

/// Reads a two-column CSV of aligned image paths. A first row of
/// `image_x_path,image_y_path` is taken as a header.
pub fn read_manifest(path: &Path) -> Result<Vec<ImagePairEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(HpnError::Malformed {
                path: path.into(),
                detail: format!("line {line}: expected 2 columns, got {}", rec.len()),
            });
        }
        if i == 0 && &rec[0] == "image_x_path" && &rec[1] == "image_y_path" {
            continue;
        }
        out.push(ImagePairEntry { line, x: base.join(&rec[0]), y: base.join(&rec[1]) });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> HpnError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HpnError::io(path, io),
        k => HpnError::Malformed { path: path.into(), detail: format!("{k:?}") },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// Per image pair: its positives, then one negative per positive.
    pub pairs: Vec<PatchPair>,
    pub positives: usize,
    pub images_used: usize,
    /// One line per skipped image pair.
    pub warnings: Vec<String>,
    /// Split of the positives in container order.
    pub split: DatasetSplit,
}

/// Lattice pairs from every usable manifest entry. Entries that cannot be
/// read, differ in size or yield fewer than two positives are skipped with a
/// warning; the call fails only when nothing is usable.
pub fn extract_manifest(entries: &[ImagePairEntry], grid_step: usize, seed: u64) -> Result<Extraction> {
    if entries.is_empty() {
        return Err(HpnError::Data("manifest lists no image pairs".into()));
    }
    if grid_step == 0 {
        return Err(HpnError::Config("grid_step must be at least 1".into()));
    }
    let mut pairs = Vec::new();
    let mut positives = 0;
    let mut images_used = 0;
    let mut warnings = Vec::new();
    let mut is_positive = Vec::new();
    for (k, e) in entries.iter().enumerate() {
        let loaded = load_pgm(&e.x).and_then(|ix| Ok((ix, load_pgm(&e.y)?)));
        let (ix, iy) = match loaded {
            Ok(v) => v,
            Err(err) => {
                warnings.push(format!("line {}: skipped: {err}", e.line));
                continue;
            }
        };
        if (ix.width(), ix.height()) != (iy.width(), iy.height()) {
            warnings.push(format!(
                "line {}: skipped: image sizes differ ({}x{} vs {}x{})",
                e.line,
                ix.width(),
                ix.height(),
                iy.width(),
                iy.height()
            ));
            continue;
        }
        let pos = extract_lattice_pairs(&ix, &iy, grid_step)?;
        if pos.len() < 2 {
            warnings.push(format!("line {}: skipped: {} lattice positions, need at least 2", e.line, pos.len()));
            continue;
        }
        let neg = make_negatives(&pos, seed.wrapping_add(k as u64))?;
        positives += pos.len();
        is_positive.extend(std::iter::repeat_n(true, pos.len()).chain(std::iter::repeat_n(false, neg.len())));
        pairs.extend(pos);
        pairs.extend(neg);
        images_used += 1;
    }
    if images_used == 0 {
        return Err(HpnError::Data(format!("no usable image pair in the manifest:\n{}", warnings.join("\n"))));
    }
    let record_of: Vec<usize> = (0..pairs.len()).filter(|&i| is_positive[i]).collect();
    let s = DatasetSplit::new(positives, seed)?;
    let map = |v: Vec<usize>| v.into_iter().map(|i| record_of[i]).collect();
    let split = DatasetSplit { train: map(s.train), validation: map(s.validation), test: map(s.test) };
    Ok(Extraction { pairs, positives, images_used, warnings, split })
}

/// `train=…`, `validation=…`, `test=…` lines of comma-separated record
/// indices.
pub fn split_to_text(split: &DatasetSplit) -> String {
    let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    format!("train={}\nvalidation={}\ntest={}\n", join(&split.train), join(&split.validation), join(&split.test))
}
