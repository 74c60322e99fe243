//! FPR95, ROC, exact nearest-neighbour matching and the evaluation report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{NormalizationStats, PatchPair};
use crate::error::{Error, Result};
use crate::model::{Encodings, HybridNetwork, Modality, Paths, Readout, Variant};
use crate::scalar::Scalar;
use crate::train::normalize_batch;
use crate::DESCRIPTOR_DIM;

/// A pair score oriented so that higher means "more likely a match".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub matched: bool,
}

impl ScoredPair {
    pub fn new(score: f64, matched: bool) -> Self {
        ScoredPair { score, matched }
    }
}

fn check_scored(scored: &[ScoredPair]) -> Result<(usize, usize)> {
    if let Some(i) = scored.iter().position(|s| !s.score.is_finite()) {
        return Err(Error::invalid("score", format!("pair {i} has non-finite score {}", scored[i].score)));
    }
    let p = scored.iter().filter(|s| s.matched).count();
    let n = scored.len() - p;
    if p == 0 {
        return Err(Error::TooFew { what: "positive pairs", needed: 1, got: 0 });
    }
    if n == 0 {
        return Err(Error::TooFew { what: "negative pairs", needed: 1, got: 0 });
    }
    Ok((p, n))
}

/// False positive rate at the highest threshold whose recall is at least
/// 95%. Scores equal to the threshold count as accepted.
pub fn fpr95(scored: &[ScoredPair]) -> Result<f64> {
    let (p, n) = check_scored(scored)?;
    let mut pos: Vec<f64> = scored.iter().filter(|s| s.matched).map(|s| s.score).collect();
    pos.sort_by(|a, b| b.total_cmp(a));
    // ceil(0.95 · P) in integers.
    let k = (95 * p).div_ceil(100);
    let t = pos[k - 1];
    let fp = scored.iter().filter(|s| !s.matched && s.score >= t).count();
    Ok(fp as f64 / n as f64)
}

/// `(FPR, TPR)` operating points from `(0, 0)` to `(1, 1)`, one per
/// distinct score.
pub fn roc(scored: &[ScoredPair]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = check_scored(scored)?;
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].matched {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a ROC staircase.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Descriptors of one modality, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub modality: Modality,
    pub dim: usize,
    pub data: Vec<f32>,
    pub source_ids: Vec<u64>,
}

impl DescriptorSet {
    pub fn new(modality: Modality, dim: usize, data: Vec<f32>, source_ids: Vec<u64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * source_ids.len() {
            return Err(Error::shape(
                "DescriptorSet::new",
                format!("{} values for {} rows of width {dim}", data.len(), source_ids.len()),
            ));
        }
        Ok(DescriptorSet { modality, dim, data, source_ids })
    }

    pub fn from_encodings<S: Scalar>(enc: &Encodings<S>, readout: Readout, source_ids: Vec<u64>) -> Result<Self> {
        let data = enc.matrix(readout).iter().map(|v| v.as_f64() as f32).collect();
        Self::new(enc.modality, DESCRIPTOR_DIM, data, source_ids)
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Largest deviation of a row norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let n: f64 = self.row(i).iter().map(|&v| v as f64 * v as f64).sum();
                libm::fabs(libm::sqrt(n) - 1.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Euclidean distance in 64-bit arithmetic.
pub fn descriptor_distance(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    libm::sqrt(s)
}

/// For every query row, the `k` nearest reference rows as `(index,
/// distance)` by ascending distance, ties to the lower index.
pub fn knn_match(queries: &DescriptorSet, reference: &DescriptorSet, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if reference.is_empty() {
        return Err(Error::TooFew { what: "reference descriptors", needed: 1, got: 0 });
    }
    if k == 0 || k > reference.len() {
        return Err(Error::invalid("k", format!("{k} is outside 1..={}", reference.len())));
    }
    if queries.dim != reference.dim {
        return Err(Error::DimensionMismatch { what: "descriptor width", left: vec![queries.dim], right: vec![reference.dim] });
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut cand: Vec<(usize, f64)> = Vec::with_capacity(reference.len());
    for q in 0..queries.len() {
        cand.clear();
        let qr = queries.row(q);
        cand.extend((0..reference.len()).map(|j| (j, descriptor_distance(qr, reference.row(j)))));
        let by = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by);
            cand.truncate(k);
        }
        cand.sort_by(by);
        out.push(cand.clone());
    }
    Ok(out)
}

/// Fraction of queries whose nearest reference row is the one with the same
/// index.
pub fn top1_accuracy(matches: &[Vec<(usize, f64)>]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let hits = matches.iter().enumerate().filter(|(i, m)| m.first().is_some_and(|&(j, _)| j == *i)).count();
    hits as f64 / matches.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub fpr95: f64,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub roc: Vec<(f64, f64)>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Oriented scores of labeled pairs, each encoded once per modality.
pub fn score_pairs<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    pairs: &[PatchPair],
    stats: &NormalizationStats,
) -> Result<Vec<ScoredPair>> {
    let paths = Paths::for_readout(readout);
    let (x, y) = normalize_batch::<S>(pairs, stats);
    let ex = net.encode(&x, Modality::X, paths)?;
    let ey = net.encode(&y, Modality::Y, paths)?;
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let s = net.oriented_score(readout, ex.row(readout, k), ey.row(readout, k))?;
            Ok(ScoredPair::new(s, p.label.is_match()))
        })
        .collect()
}

pub fn evaluate<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    pairs: &[PatchPair],
    stats: &NormalizationStats,
    config_hash: String,
    checkpoint_id: String,
) -> Result<EvalReport> {
    let scored = score_pairs(net, readout, pairs, stats)?;
    let points = roc(&scored)?;
    let positives = scored.iter().filter(|s| s.matched).count();
    Ok(EvalReport {
        variant: net.variant(),
        fpr95: fpr95(&scored)?,
        auc: auc(&points),
        positives,
        negatives: scored.len() - positives,
        roc: points,
        config_hash,
        checkpoint_id,
    })
}

#[cfg(test)]
mod tests;
