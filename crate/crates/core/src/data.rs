//! Patch pairs, lattice extraction, flips, per-modality normalization,
//! train/validation/test splits and the synthetic two-modality generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{index_except, seeded, shuffle, standard_normal, stream, DetRng};
use crate::scalar::Scalar;
use crate::{PATCH_PIXELS, PATCH_SIZE};

/// A 64×64 8-bit grayscale patch, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Patch {
    pixels: Vec<u8>,
}

impl core::fmt::Debug for Patch {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let sum: u64 = self.pixels.iter().map(|&p| p as u64).sum();
        write!(f, "Patch(64x64, sum={sum})")
    }
}

impl Patch {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != PATCH_PIXELS {
            return Err(Error::shape("Patch::new", format!("expected {PATCH_PIXELS} pixels, got {}", pixels.len())));
        }
        Ok(Patch { pixels })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(PATCH_PIXELS);
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                pixels.push(f(r, c));
            }
        }
        Patch { pixels }
    }

    pub fn filled(v: u8) -> Self {
        Patch { pixels: vec![v; PATCH_PIXELS] }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * PATCH_SIZE + c]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn flipped(&self, flips: Flips) -> Patch {
        let last = PATCH_SIZE - 1;
        Patch::from_fn(|r, c| {
            let sr = if flips.vertical { last - r } else { r };
            let sc = if flips.horizontal { last - c } else { c };
            self.get(sr, sc)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Match,
    NonMatch,
}

impl Label {
    pub fn is_match(self) -> bool {
        self == Label::Match
    }

    pub fn from_match(m: bool) -> Self {
        if m {
            Label::Match
        } else {
            Label::NonMatch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub x: Patch,
    pub y: Patch,
    pub label: Label,
    pub source_id: u64,
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "GrayImage::new",
                format!("{width}x{height} needs {} bytes, got {}", width * height, data.len()),
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn window(&self, top: usize, left: usize) -> Patch {
        Patch::from_fn(|r, c| self.data[(top + r) * self.width + left + c])
    }
}

pub const DEFAULT_GRID_STEP: usize = 32;

/// Matched pairs at every lattice node where a full window fits in both
/// images. Images smaller than a patch give an empty list.
pub fn extract_lattice_pairs(ix: &GrayImage, iy: &GrayImage, grid_step: usize) -> Result<Vec<PatchPair>> {
    if grid_step == 0 {
        return Err(Error::invalid("grid_step", "must be at least 1"));
    }
    if ix.width != iy.width || ix.height != iy.height {
        return Err(Error::DimensionMismatch {
            what: "aligned image pair",
            left: vec![ix.height, ix.width],
            right: vec![iy.height, iy.width],
        });
    }
    let mut out = Vec::new();
    if ix.width < PATCH_SIZE || ix.height < PATCH_SIZE {
        return Ok(out);
    }
    for top in (0..=ix.height - PATCH_SIZE).step_by(grid_step) {
        for left in (0..=ix.width - PATCH_SIZE).step_by(grid_step) {
            out.push(PatchPair {
                x: ix.window(top, left),
                y: iy.window(top, left),
                label: Label::Match,
                source_id: out.len() as u64,
            });
        }
    }
    Ok(out)
}

/// Index pairs `(i, j)`, `j ≠ i` uniform, one per positive.
pub fn negative_indices(n: usize, rng: &mut DetRng) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::TooFew { what: "positive pairs", needed: 2, got: n });
    }
    Ok((0..n).map(|i| (i, index_except(rng, n, i))).collect())
}

/// For each positive `(x_i, y_i)` a non-matching `(x_i, y_j)`; the negative
/// keeps the source id of its X patch.
pub fn make_negatives(positives: &[PatchPair], seed: u64) -> Result<Vec<PatchPair>> {
    let mut rng = seeded(seed);
    let idx = negative_indices(positives.len(), &mut rng)?;
    Ok(idx
        .into_iter()
        .map(|(i, j)| PatchPair {
            x: positives[i].x.clone(),
            y: positives[j].y.clone(),
            label: Label::NonMatch,
            source_id: positives[i].source_id,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    /// Mirror columns: `(r, c) → (r, 63 − c)`.
    pub horizontal: bool,
    /// Mirror rows: `(r, c) → (63 − r, c)`.
    pub vertical: bool,
}

impl Flips {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Flips { horizontal: rng.random_bool(0.5), vertical: rng.random_bool(0.5) }
    }

    pub fn is_identity(self) -> bool {
        !self.horizontal && !self.vertical
    }
}

/// Flips both patches with the same random mask.
pub fn augment<R: Rng + ?Sized>(pair: &PatchPair, rng: &mut R) -> PatchPair {
    apply_flips(pair, Flips::sample(rng))
}

pub fn apply_flips(pair: &PatchPair, flips: Flips) -> PatchPair {
    PatchPair { x: pair.x.flipped(flips), y: pair.y.flipped(flips), label: pair.label, source_id: pair.source_id }
}

/// Per-modality pixel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean_x: f64,
    pub std_x: f64,
    pub mean_y: f64,
    pub std_y: f64,
}

impl NormalizationStats {
    pub fn new(mean_x: f64, std_x: f64, mean_y: f64, std_y: f64) -> Result<Self> {
        for (name, s) in [("std_x", std_x), ("std_y", std_y)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(name, format!("{s} is not a positive standard deviation")));
            }
        }
        if !(mean_x.is_finite() && mean_y.is_finite()) {
            return Err(Error::invalid("mean", "must be finite"));
        }
        Ok(NormalizationStats { mean_x, std_x, mean_y, std_y })
    }

    /// Population statistics over every pixel of the given pairs.
    pub fn compute<'a>(pairs: impl IntoIterator<Item = &'a PatchPair>) -> Result<Self> {
        let (mut n, mut sx, mut sy) = (0u64, 0u64, 0u64);
        let (mut qx, mut qy) = (0u64, 0u64);
        for p in pairs {
            n += 1;
            for (&a, &b) in p.x.pixels().iter().zip(p.y.pixels()) {
                let (a, b) = (a as u64, b as u64);
                sx += a;
                sy += b;
                qx += a * a;
                qy += b * b;
            }
        }
        if n == 0 {
            return Err(Error::TooFew { what: "pairs for normalization statistics", needed: 1, got: 0 });
        }
        // Integer sums keep the variance exact before the final division.
        let count = (n * PATCH_PIXELS as u64) as f64;
        let var = |s: u64, q: u64| {
            let s = s as f64;
            ((q as f64) - s * s / count) / count
        };
        Self::new(sx as f64 / count, libm::sqrt(var(sx, qx).max(0.0)), sy as f64 / count, libm::sqrt(var(sy, qy).max(0.0)))
    }

    pub fn normalize_into<S: Scalar>(&self, patch: &Patch, modality: crate::model::Modality, out: &mut [S]) {
        let (m, s) = match modality {
            crate::model::Modality::X => (self.mean_x, self.std_x),
            crate::model::Modality::Y => (self.mean_y, self.std_y),
        };
        for (o, &p) in out.iter_mut().zip(patch.pixels()) {
            *o = S::from_f64_lossy((p as f64 - m) / s);
        }
    }

    /// Real-valued `(x, y)` for one pair.
    pub fn normalize<S: Scalar>(&self, pair: &PatchPair) -> (Vec<S>, Vec<S>) {
        let mut x = vec![S::zero(); PATCH_PIXELS];
        let mut y = vec![S::zero(); PATCH_PIXELS];
        self.normalize_into(&pair.x, crate::model::Modality::X, &mut x);
        self.normalize_into(&pair.y, crate::model::Modality::Y, &mut y);
        (x, y)
    }
}

/// Disjoint, exhaustive index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.70, 0.10, 0.20);

impl DatasetSplit {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        Self::with_fractions(n, DEFAULT_SPLIT, seed)
    }

    /// Shuffles `0..n` and cuts it at `round(f_train·n)` and
    /// `round((f_train + f_val)·n)`.
    pub fn with_fractions(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (a, b, c) = fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || libm::fabs(a + b + c - 1.0) > 1e-9 {
            return Err(Error::invalid("split fractions", format!("{fractions:?} must be in [0,1] and sum to 1")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle(&mut seeded(seed), &mut idx);
        let cut1 = libm::round(a * n as f64) as usize;
        let cut2 = (libm::round((a + b) * n as f64) as usize).clamp(cut1, n);
        let test = idx.split_off(cut2);
        let validation = idx.split_off(cut1);
        Ok(DatasetSplit { train: idx, validation, test })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pearson correlation of two equally long pixel arrays; 0 when either is
/// constant.
pub fn pearson(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / libm::sqrt(saa * sbb)
    }
}

const SYNTH_NOISE: f64 = 0.02;
/// Width in pixels of the soft boundary of the reversed half-plane.
const REVERSAL_RAMP: f64 = 3.0;
/// Vertex of the tone curve: darker values are inverted, brighter ones kept.
const FOLD_AT: f64 = 0.3;

fn uniform(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Base scene in [0, 1]: a sum of a few gratings, blobs and step edges.
fn synth_base(rng: &mut DetRng) -> Vec<f64> {
    let mut img = vec![0.0; PATCH_PIXELS];
    let parts = rng.random_range(2..=4);
    for _ in 0..parts {
        let amp = uniform(rng, 0.4, 1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        match rng.random_range(0..3) {
            0 => {
                let theta = uniform(rng, 0.0, core::f64::consts::PI);
                let freq = uniform(rng, 0.05, 0.35);
                let phase = uniform(rng, 0.0, core::f64::consts::TAU);
                let (s, c) = libm::sincos(theta);
                for (k, v) in img.iter_mut().enumerate() {
                    let (r, col) = ((k / PATCH_SIZE) as f64, (k % PATCH_SIZE) as f64);
                    *v += amp * libm::sin(freq * (c * col + s * r) + phase);
                }
            }
            1 => {
                let (cr, cc) = (uniform(rng, 0.0, 64.0), uniform(rng, 0.0, 64.0));
                let sigma = uniform(rng, 4.0, 16.0);
                for (k, v) in img.iter_mut().enumerate() {
                    let (r, col) = ((k / PATCH_SIZE) as f64, (k % PATCH_SIZE) as f64);
                    let d2 = (r - cr) * (r - cr) + (col - cc) * (col - cc);
                    *v += 2.0 * amp * libm::exp(-d2 / (2.0 * sigma * sigma));
                }
            }
            _ => {
                let theta = uniform(rng, 0.0, core::f64::consts::TAU);
                let offset = uniform(rng, -16.0, 16.0);
                let (s, c) = libm::sincos(theta);
                for (k, v) in img.iter_mut().enumerate() {
                    let (r, col) = ((k / PATCH_SIZE) as f64 - 31.5, (k % PATCH_SIZE) as f64 - 31.5);
                    if c * col + s * r > offset {
                        *v += amp;
                    }
                }
            }
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    img.iter_mut().for_each(|v| *v = 0.1 + 0.8 * (*v - lo) / span);
    img
}

fn blur3(img: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; PATCH_PIXELS];
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            let (mut s, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..=(r + 1).min(PATCH_SIZE - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(PATCH_SIZE - 1) {
                    s += img[rr * PATCH_SIZE + cc];
                    n += 1.0;
                }
            }
            out[r * PATCH_SIZE + c] = s / n;
        }
    }
    out
}

/// The second modality's appearance: folded tone curve, contrast reversal
/// on one soft-edged half-plane and a 3×3 blur, each blended in by `severity`.
fn synth_y(base: &[f64], severity: f64, rng: &mut DetRng) -> Vec<f64> {
    let theta = uniform(rng, 0.0, core::f64::consts::TAU);
    let offset = uniform(rng, -12.0, 12.0);
    let (s, c) = libm::sincos(theta);
    let toned: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let folded = (v - FOLD_AT) * (v - FOLD_AT) / ((1.0 - FOLD_AT) * (1.0 - FOLD_AT));
            let t = v + severity * (folded - v);
            let (r, col) = ((k / PATCH_SIZE) as f64 - 31.5, (k % PATCH_SIZE) as f64 - 31.5);
            let side = 1.0 / (1.0 + libm::exp(-(c * col + s * r - offset) / REVERSAL_RAMP));
            t + severity * side * (1.0 - 2.0 * t)
        })
        .collect();
    let blurred = blur3(&toned);
    toned.iter().zip(&blurred).map(|(&a, &b)| a + severity * (b - a)).collect()
}

fn quantize(img: &[f64], rng: &mut DetRng) -> Patch {
    let mut it = img.iter();
    Patch::from_fn(|_, _| {
        let v = *it.next().unwrap() + SYNTH_NOISE * standard_normal(rng);
        libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
    })
}

/// `n_pairs` positives followed by `n_pairs` random negatives. Severity 0
/// leaves only independent noise between the modalities.
pub fn synth_multimodal(n_pairs: usize, seed: u64, severity: f64) -> Result<Vec<PatchPair>> {
    if n_pairs < 2 {
        return Err(Error::TooFew { what: "synthetic pairs", needed: 2, got: n_pairs });
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::invalid("severity", format!("{severity} is outside [0, 1]")));
    }
    let mut scene = stream(seed, 0);
    let mut noise = stream(seed, 1);
    let mut out = Vec::with_capacity(2 * n_pairs);
    for i in 0..n_pairs {
        let base = synth_base(&mut scene);
        let y = synth_y(&base, severity, &mut scene);
        out.push(PatchPair {
            x: quantize(&base, &mut noise),
            y: quantize(&y, &mut noise),
            label: Label::Match,
            source_id: i as u64,
        });
    }
    let negatives = make_negatives(&out, seed ^ 0x6E65_6761_7469_7665)?;
    out.extend(negatives);
    Ok(out)
}
