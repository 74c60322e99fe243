use super::*;
use crate::data::synth_multimodal;
use crate::model::BranchArch;
use crate::rng::{seeded, standard_normal};
use crate::train::{SplitPart, TrainingSet};
use alloc::string::ToString;
use proptest::prelude::*;
use rand::Rng;

/// Sweeps every observed score as a threshold, keeps those reaching 95%
/// recall, and reports the false positive rate of the largest one.
fn sweep_oracle(scored: &[ScoredPair]) -> f64 {
    let p = scored.iter().filter(|s| s.matched).count() as f64;
    let n = scored.iter().filter(|s| !s.matched).count() as f64;
    let mut best: Option<(f64, f64)> = None;
    for t in scored.iter().map(|s| s.score) {
        let tp = scored.iter().filter(|s| s.matched && s.score >= t).count() as f64;
        let fp = scored.iter().filter(|s| !s.matched && s.score >= t).count() as f64;
        if tp / p >= 0.95 - 1e-12 && (tp * 100.0 >= 95.0 * p) && best.is_none_or(|(bt, _)| t > bt) {
            best = Some((t, fp / n));
        }
    }
    best.unwrap().1
}

fn random_set(seed: u64, n: usize, ties: bool) -> Vec<ScoredPair> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let m = rng.random_bool(0.5);
            let mut s = standard_normal(&mut rng) + if m { 1.0 } else { 0.0 };
            if ties {
                s = libm::round(s * 4.0) / 4.0;
            }
            ScoredPair::new(s, m)
        })
        .collect()
}

fn ensure_both(mut v: Vec<ScoredPair>) -> Vec<ScoredPair> {
    v.push(ScoredPair::new(0.3, true));
    v.push(ScoredPair::new(-0.3, false));
    v
}

#[test]
fn separated_scores_give_zero() {
    let mut v: Vec<ScoredPair> = (0..50).map(|i| ScoredPair::new(10.0 + i as f64, true)).collect();
    v.extend((0..50).map(|i| ScoredPair::new(i as f64 - 100.0, false)));
    assert_eq!(fpr95(&v).unwrap(), 0.0);
    assert!((auc(&roc(&v).unwrap()) - 1.0).abs() < 1e-12);
}

#[test]
fn interleaved_twenty_by_twenty() {
    let mut v: Vec<ScoredPair> = (1..=20).map(|i| ScoredPair::new(i as f64, true)).collect();
    v.extend((0..20).map(|i| ScoredPair::new(0.5 + i as f64, false)));
    // k = 19 positives needed: threshold 2, negatives 2.5..19.5 accepted.
    assert_eq!(fpr95(&v).unwrap(), sweep_oracle(&v));
    assert_eq!(fpr95(&v).unwrap(), 18.0 / 20.0);
}

#[test]
fn random_scores_sit_at_chance() {
    let mut rng = seeded(9);
    let v: Vec<ScoredPair> = (0..40_000).map(|_| ScoredPair::new(rng.random::<f64>(), rng.random_bool(0.5))).collect();
    let f = fpr95(&v).unwrap();
    assert!((f - 0.95).abs() < 0.02, "{f}");
}

#[test]
fn matches_sweep_oracle_on_random_sets() {
    for seed in 0..200u64 {
        let v = ensure_both(random_set(seed, 5 + (seed as usize * 7) % 300, seed % 2 == 0));
        assert_eq!(fpr95(&v).unwrap(), sweep_oracle(&v), "seed {seed}");
    }
}

#[test]
fn invariant_under_increasing_transforms() {
    for seed in 0..20 {
        let v: Vec<ScoredPair> =
            random_set(seed, 200, false).into_iter().map(|s| ScoredPair::new(s.score.abs() + 0.1, s.matched)).collect();
        let v = ensure_both(v);
        let f = fpr95(&v).unwrap();
        let affine: Vec<_> = v.iter().map(|s| ScoredPair::new(2.0 * s.score + 3.0, s.matched)).collect();
        let cubed: Vec<_> = v.iter().map(|s| ScoredPair::new(s.score.powi(3), s.matched)).collect();
        assert_eq!(fpr95(&affine).unwrap(), f);
        assert_eq!(fpr95(&cubed).unwrap(), f);
    }
}

#[test]
fn rejects_degenerate_inputs() {
    assert!(fpr95(&[ScoredPair::new(1.0, true)]).is_err());
    assert!(fpr95(&[ScoredPair::new(1.0, false)]).is_err());
    assert!(fpr95(&[ScoredPair::new(f64::NAN, true), ScoredPair::new(0.0, false)]).is_err());
    assert!(roc(&[]).is_err());
}

#[test]
fn roc_examples() {
    let v = [ScoredPair::new(1.0, true), ScoredPair::new(0.0, false)];
    assert_eq!(roc(&v).unwrap(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    let flipped: Vec<_> = v.iter().map(|s| ScoredPair::new(-s.score, s.matched)).collect();
    assert_eq!(roc(&flipped).unwrap(), vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
}

proptest! {
    #[test]
    fn roc_is_monotone_and_reflects_under_negation(seed: u64, n in 2usize..200) {
        let v = ensure_both(random_set(seed, n, seed % 3 == 0));
        let pts = roc(&v).unwrap();
        prop_assert_eq!(pts[0], (0.0, 0.0));
        prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        prop_assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        // Negating every score visits the same operating points in reverse,
        // each mirrored to (1 − FPR, 1 − TPR).
        let neg: Vec<_> = v.iter().map(|s| ScoredPair::new(-s.score, s.matched)).collect();
        let mirrored: Vec<(f64, f64)> = pts.iter().rev().map(|&(f, t)| (1.0 - f, 1.0 - t)).collect();
        let got = roc(&neg).unwrap();
        prop_assert_eq!(got.len(), mirrored.len());
        for (a, b) in got.iter().zip(&mirrored) {
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
        // FPR95 is the first operating point reaching 95% recall.
        let first = pts.iter().find(|p| p.1 * 100.0 >= 95.0 - 1e-9).unwrap();
        prop_assert!((first.0 - fpr95(&v).unwrap()).abs() < 1e-12);
    }
}

fn random_descriptors(n: usize, seed: u64, modality: Modality) -> DescriptorSet {
    let mut rng = seeded(seed);
    let mut data: Vec<f32> = (0..n * DESCRIPTOR_DIM).map(|_| standard_normal(&mut rng) as f32).collect();
    for row in data.chunks_mut(DESCRIPTOR_DIM) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    DescriptorSet::new(modality, DESCRIPTOR_DIM, data, (0..n as u64).collect()).unwrap()
}

fn brute_force_ranking(q: &DescriptorSet, r: &DescriptorSet, i: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..r.len()).map(|j| (j, descriptor_distance(q.row(i), r.row(j)))).collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

#[test]
fn knn_equals_brute_force() {
    let q = random_descriptors(200, 1, Modality::X);
    let r = random_descriptors(200, 2, Modality::Y);
    for k in [1, 5, 200] {
        let m = knn_match(&q, &r, k).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[..], brute_force_ranking(&q, &r, i)[..k]);
        }
    }
    let full = knn_match(&q, &r, 200).unwrap();
    let mut idx: Vec<usize> = full[3].iter().map(|p| p.0).collect();
    idx.sort_unstable();
    assert_eq!(idx, (0..200).collect::<Vec<_>>());
}

#[test]
fn knn_self_match_and_ties() {
    let q = random_descriptors(50, 3, Modality::X);
    let m = knn_match(&q, &q, 1).unwrap();
    assert!(m.iter().enumerate().all(|(i, r)| r[0] == (i, 0.0)));
    assert_eq!(top1_accuracy(&m), 1.0);
    // Duplicate reference rows: the lower index wins.
    let mut data = q.row(7).to_vec();
    data.extend_from_slice(q.row(7));
    let dup = DescriptorSet::new(Modality::Y, DESCRIPTOR_DIM, data, vec![0, 1]).unwrap();
    assert_eq!(knn_match(&q, &dup, 2).unwrap()[7], vec![(0, 0.0), (1, 0.0)]);
}

#[test]
fn knn_is_permutation_invariant() {
    let q = random_descriptors(30, 4, Modality::X);
    let r = random_descriptors(40, 5, Modality::Y);
    let perm: Vec<usize> = (0..40).map(|i| (i * 17 + 3) % 40).collect();
    let mut data = Vec::new();
    for &p in &perm {
        data.extend_from_slice(r.row(p));
    }
    let rp = DescriptorSet::new(Modality::Y, DESCRIPTOR_DIM, data, perm.iter().map(|&p| p as u64).collect()).unwrap();
    let a = knn_match(&q, &r, 5).unwrap();
    let b = knn_match(&q, &rp, 5).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        let mapped: Vec<(usize, f64)> = rb.iter().map(|&(j, d)| (perm[j], d)).collect();
        assert_eq!(ra, &mapped);
    }
}

#[test]
fn knn_rejects_bad_arguments() {
    let q = random_descriptors(3, 1, Modality::X);
    let empty = DescriptorSet::new(Modality::Y, DESCRIPTOR_DIM, Vec::new(), Vec::new()).unwrap();
    assert!(knn_match(&q, &empty, 1).is_err());
    assert!(knn_match(&q, &q, 0).is_err());
    assert!(knn_match(&q, &q, 4).is_err());
    assert!(DescriptorSet::new(Modality::X, 4, vec![0.0; 7], vec![0, 1]).is_err());
}

fn eval_fixture(variant: Variant) -> (HybridNetwork<f32>, TrainingSet) {
    let data = TrainingSet::from_pairs(&synth_multimodal(300, 17, 1.0).unwrap(), 17).unwrap();
    let mut net = HybridNetwork::with_arch(variant, BranchArch::scaled(variant, 16).unwrap());
    net.init_params(17, 0.01).unwrap();
    (net, data)
}

#[test]
fn untrained_network_scores_near_chance() {
    let (net, data) = eval_fixture(Variant::L2Hinge);
    let pairs = data.labeled_pairs(SplitPart::Test, 1).unwrap();
    let r = evaluate(&net, Readout::Hybrid, &pairs, &data.stats, "c".to_string(), "k".to_string()).unwrap();
    assert!((r.fpr95 - 0.95).abs() <= 0.05, "{}", r.fpr95);
    assert_eq!((r.positives, r.negatives), (60, 60));
}

#[test]
fn report_is_deterministic_and_descriptors_agree_with_scores() {
    let (net, data) = eval_fixture(Variant::L2Hinge);
    let pairs = data.labeled_pairs(SplitPart::Test, 2).unwrap();
    let a = evaluate(&net, Readout::Hybrid, &pairs, &data.stats, "c".into(), "k".into()).unwrap();
    let b = evaluate(&net, Readout::Hybrid, &pairs, &data.stats, "c".into(), "k".into()).unwrap();
    assert_eq!(a, b);

    let (x, y) = normalize_batch::<f32>(&pairs, &data.stats);
    let ex = net.encode(&x, Modality::X, Paths::ALL).unwrap();
    let ey = net.encode(&y, Modality::Y, Paths::ALL).unwrap();
    let ids: Vec<u64> = pairs.iter().map(|p| p.source_id).collect();
    let dx = DescriptorSet::from_encodings(&ex, Readout::Hybrid, ids.clone()).unwrap();
    let dy = DescriptorSet::from_encodings(&ey, Readout::Hybrid, ids).unwrap();
    assert!(dx.max_norm_error() < 1e-6 && dy.max_norm_error() < 1e-6);
    let scored = score_pairs(&net, Readout::Hybrid, &pairs, &data.stats).unwrap();
    for (k, s) in scored.iter().enumerate() {
        assert!((-s.score - descriptor_distance(dx.row(k), dy.row(k))).abs() < 1e-6);
    }
}
