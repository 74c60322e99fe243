//! Hard negative mining within a batch on cached encodings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Label, NormalizationStats, PatchPair};
use crate::error::{Error, Result};
use crate::loss::PairIndex;
use crate::model::{Encodings, HybridNetwork, Modality, Paths, Readout, Variant};
use crate::rng::{index_except, shuffle, DetRng};
use crate::scalar::Scalar;
use crate::PATCH_PIXELS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Fraction of the batch whose negative is the hardest one found.
    pub h_m: f64,
    pub enabled: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { h_m: 0.8, enabled: true }
    }
}

impl MiningConfig {
    pub fn disabled() -> Self {
        MiningConfig { enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.h_m) {
            return Err(Error::invalid("h_m", format!("{} is outside [0, 1]", self.h_m)));
        }
        Ok(())
    }

    /// `M = round(h_m · N)`, or 0 when mining is off.
    pub fn mined_count(&self, n: usize) -> usize {
        if self.enabled {
            libm::round(self.h_m * n as f64) as usize
        } else {
            0
        }
    }
}

/// Work done by one mining call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MiningProbe {
    /// Patches pushed through a branch forward pass.
    pub encoded_patches: usize,
    /// Pair scores evaluated on cached encodings.
    pub scores: usize,
}

/// One negative `(i, j)` per anchor `i` of the batch, in anchor order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedNegatives {
    pub pairs: Vec<(usize, usize)>,
    /// Whether `pairs[i]` came from the hardest-negative search.
    pub mined: Vec<bool>,
    pub probe: MiningProbe,
}

impl MinedNegatives {
    pub fn mined_count(&self) -> usize {
        self.mined.iter().filter(|&&m| m).count()
    }

    pub fn to_pair_index(&self) -> PairIndex {
        PairIndex::positives_then(self.pairs.len(), &self.pairs)
    }
}

/// Selects negatives from the encodings of an aligned batch: `M` random
/// anchors get the `j ≠ i` with the highest match score (lowest index on
/// ties), the rest a uniformly random `j ≠ i`.
pub fn mine_from_encodings<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    ex: &Encodings<S>,
    ey: &Encodings<S>,
    cfg: &MiningConfig,
    rng: &mut DetRng,
) -> Result<MinedNegatives> {
    cfg.validate()?;
    let n = ex.n;
    if ey.n != n {
        return Err(Error::DimensionMismatch { what: "mining batch", left: vec![n], right: vec![ey.n] });
    }
    if n < 2 {
        return Err(Error::TooFew { what: "pairs in a mining batch", needed: 2, got: n });
    }
    let m = cfg.mined_count(n);
    let mut mined = vec![false; n];
    if m > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(rng, &mut order);
        for &i in &order[..m] {
            mined[i] = true;
        }
    }
    let mut probe = MiningProbe::default();
    let mut pairs = Vec::with_capacity(n);
    for (i, &is_mined) in mined.iter().enumerate() {
        let j = if is_mined {
            let xi = ex.row(readout, i);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let s = net.oriented_score(readout, xi, ey.row(readout, j))?;
                probe.scores += 1;
                if s > best.0 || best.1 == usize::MAX {
                    best = (s, j);
                }
            }
            best.1
        } else {
            index_except(rng, n, i)
        };
        pairs.push((i, j));
    }
    Ok(MinedNegatives { pairs, mined, probe })
}

/// Encodes both modalities of a normalized batch without gradients and
/// mines negatives on the result.
pub fn mine_batch<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    x: &[S],
    y: &[S],
    cfg: &MiningConfig,
    rng: &mut DetRng,
) -> Result<MinedNegatives> {
    cfg.validate()?;
    let n = x.len() / PATCH_PIXELS;
    if n < 2 {
        return Err(Error::TooFew { what: "pairs in a mining batch", needed: 2, got: n });
    }
    let paths = Paths::for_readout(readout);
    let ex = net.encode(x, Modality::X, paths)?;
    let ey = net.encode(y, Modality::Y, paths)?;
    let mut out = mine_from_encodings(net, readout, &ex, &ey, cfg, rng)?;
    out.probe.encoded_patches = ex.n + ey.n;
    Ok(out)
}

/// Mined non-matching pairs for a batch of positive patch pairs.
pub fn mine_pairs<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    positives: &[PatchPair],
    stats: &NormalizationStats,
    cfg: &MiningConfig,
    rng: &mut DetRng,
) -> Result<Vec<PatchPair>> {
    let (x, y) = crate::train::normalize_batch::<S>(positives, stats);
    let neg = mine_batch(net, readout, &x, &y, cfg, rng)?;
    Ok(neg
        .pairs
        .iter()
        .map(|&(i, j)| PatchPair {
            x: positives[i].x.clone(),
            y: positives[j].y.clone(),
            label: Label::NonMatch,
            source_id: positives[i].source_id,
        })
        .collect())
}

/// Distribution of negative-pair scores: L2 distances over `[0, 2]`, or
/// match probabilities over `[0, 1]` for the softmax variant.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// Negatives whose hinge term is inactive (distance ≥ margin); `None`
    /// for the softmax variant.
    pub inactive_fraction: Option<f64>,
}

impl HardnessHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn hardness_histogram<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    ex: &Encodings<S>,
    ey: &Encodings<S>,
    pairs: &PairIndex,
    bins: usize,
    margin: f64,
) -> Result<HardnessHistogram> {
    if bins == 0 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    let (lo, hi) = match net.variant() {
        Variant::L2Hinge => (0.0, 2.0),
        Variant::Softmax => (0.0, 1.0),
    };
    let mut counts = vec![0usize; bins];
    let (mut negatives, mut inactive) = (0usize, 0usize);
    for k in (0..pairs.len()).filter(|&k| !pairs.matched[k]) {
        let s = net.score_pair_with(readout, ex.row(readout, pairs.x[k]), ey.row(readout, pairs.y[k]))?.as_f64();
        let b = libm::floor((s - lo) / (hi - lo) * bins as f64).clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
        negatives += 1;
        if s >= margin {
            inactive += 1;
        }
    }
    let inactive_fraction = match net.variant() {
        Variant::L2Hinge if negatives > 0 => Some(inactive as f64 / negatives as f64),
        _ => None,
    };
    Ok(HardnessHistogram { lo, hi, counts, inactive_fraction })
}
