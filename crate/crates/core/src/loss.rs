//! Matching objectives: hinge on descriptor distance, two-class softmax, and
//! the hybrid combination with auxiliary terms on the branch outputs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{BoundParams, EncodedVars, Encodings, Group, HybridNetwork, Readout, Variant};
use crate::scalar::Scalar;
use crate::tape::{two_class_nll, Tape, Var, DISTANCE_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub variant: Variant,
    /// Hinge margin C for non-matching pairs.
    pub margin: f64,
    pub main_weight: f64,
    pub aux_weight_siam: f64,
    pub aux_weight_asym: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { variant: Variant::L2Hinge, margin: 1.0, main_weight: 1.0, aux_weight_siam: 1.0, aux_weight_asym: 1.0 }
    }
}

impl LossConfig {
    pub fn for_variant(variant: Variant) -> Self {
        LossConfig { variant, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("margin", format!("{} must be positive", self.margin)));
        }
        for (name, w) in [
            ("main_weight", self.main_weight),
            ("aux_weight_siam", self.aux_weight_siam),
            ("aux_weight_asym", self.aux_weight_asym),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(name, format!("{w} must be non-negative")));
            }
        }
        if self.main_weight == 0.0 && self.aux_weight_siam == 0.0 && self.aux_weight_asym == 0.0 {
            return Err(Error::invalid("loss weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    /// Encoding a score should be read from: the hybrid one whenever the main
    /// loss is active, otherwise the single trained branch.
    pub fn readout(&self) -> Readout {
        if self.main_weight > 0.0 {
            Readout::Hybrid
        } else if self.aux_weight_siam > 0.0 {
            Readout::Siamese
        } else {
            Readout::Asymmetric
        }
    }

    /// Network paths the configured terms need.
    pub fn paths(&self) -> crate::model::Paths {
        let softmax = self.variant == Variant::Softmax;
        crate::model::Paths {
            siamese: self.aux_weight_siam > 0.0,
            asym: self.aux_weight_asym > 0.0,
            hybrid: self.main_weight > 0.0,
            head_main: softmax && self.main_weight > 0.0,
            head_siam: softmax && self.aux_weight_siam > 0.0,
            head_asym: softmax && self.aux_weight_asym > 0.0,
        }
    }

    fn check_net<S: Scalar>(&self, net: &HybridNetwork<S>) -> Result<()> {
        if net.variant() != self.variant {
            return Err(Error::VariantMismatch { expected: net.variant().name(), found: self.variant.name() });
        }
        Ok(())
    }
}

/// Hinge loss on the L2 distance of one pair: the distance itself for a
/// match, `max(0, C − d)` otherwise.
pub fn hinge_l2<S: Scalar>(dx: &[S], dy: &[S], matched: bool, margin: S) -> S {
    let s: S = dx.iter().zip(dy).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let d = (s + S::from_f64_lossy(DISTANCE_EPS)).sqrt();
    if matched {
        d
    } else {
        (margin - d).max(S::zero())
    }
}

/// Mean two-class cross entropy; class index 1 is "match".
pub fn softmax_match_loss<S: Scalar>(logits: &[[S; 2]], matched: &[bool]) -> S {
    if logits.is_empty() {
        return S::zero();
    }
    let total: S = logits.iter().zip(matched).map(|(l, &m)| two_class_nll(l[0], l[1], m)).sum();
    total / S::from_usize(logits.len()).unwrap()
}

/// Pairs of rows from an X batch and a Y batch with match labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairIndex {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub matched: Vec<bool>,
}

impl PairIndex {
    /// `n` positives `(i, i)` followed by the given negatives.
    pub fn positives_then(n: usize, negatives: &[(usize, usize)]) -> Self {
        let mut p = PairIndex::default();
        for i in 0..n {
            p.push(i, i, true);
        }
        for &(i, j) in negatives {
            p.push(i, j, false);
        }
        p
    }

    pub fn push(&mut self, x: usize, y: usize, matched: bool) {
        self.x.push(x);
        self.y.push(y);
        self.matched.push(matched);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub total: T,
    pub main: T,
    pub aux_siam: T,
    pub aux_asym: T,
}

impl LossParts<f64> {
    pub fn scaled(&self, k: f64) -> Self {
        LossParts { total: self.total * k, main: self.main * k, aux_siam: self.aux_siam * k, aux_asym: self.aux_asym * k }
    }

    pub fn add(&self, o: &Self) -> Self {
        LossParts {
            total: self.total + o.total,
            main: self.main + o.main,
            aux_siam: self.aux_siam + o.aux_siam,
            aux_asym: self.aux_asym + o.aux_asym,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.main.is_finite() && self.aux_siam.is_finite() && self.aux_asym.is_finite()
    }
}

#[allow(clippy::too_many_arguments)]
fn term_on<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    variant: Variant,
    head: Group,
    a: Var,
    b: Var,
    pairs: &PairIndex,
    margin: S,
) -> Result<Var> {
    let ga = tape.gather_rows(a, &pairs.x)?;
    let gb = tape.gather_rows(b, &pairs.y)?;
    let per_pair = match variant {
        Variant::L2Hinge => {
            let d = tape.pair_distance(ga, gb)?;
            tape.hinge(d, &pairs.matched, margin)?
        }
        Variant::Softmax => {
            let s = tape.add(ga, gb)?;
            let (w, bias) = bound.linear(head)?;
            let logits = tape.linear(s, w, bias)?;
            tape.softmax_ce(logits, &pairs.matched)?
        }
    };
    Ok(tape.mean(per_pair))
}

/// Records the weighted hybrid loss over `pairs` on `tape`.
///
/// Returns the total and each weighted part as tape nodes; parts with zero
/// weight are `None`.
pub fn hybrid_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    net: &HybridNetwork<S>,
    bound: &BoundParams,
    ex: &EncodedVars,
    ey: &EncodedVars,
    pairs: &PairIndex,
    cfg: &LossConfig,
) -> Result<(Var, LossParts<Option<Var>>)> {
    cfg.validate()?;
    cfg.check_net(net)?;
    let margin = S::from_f64_lossy(cfg.margin);
    let missing = |what: &str| Error::Tape(format!("{what} encoding was not computed"));
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    for (weight, readout, head) in [
        (cfg.main_weight, Readout::Hybrid, Group::HeadMain),
        (cfg.aux_weight_siam, Readout::Siamese, Group::HeadSiam),
        (cfg.aux_weight_asym, Readout::Asymmetric, Group::HeadAsym),
    ] {
        if weight == 0.0 {
            continue;
        }
        let (a, b) = match readout {
            Readout::Hybrid => (ex.hybrid.ok_or_else(|| missing("hybrid"))?, ey.hybrid.ok_or_else(|| missing("hybrid"))?),
            Readout::Siamese => (ex.siam.ok_or_else(|| missing("siamese"))?, ey.siam.ok_or_else(|| missing("siamese"))?),
            Readout::Asymmetric => (ex.asym.ok_or_else(|| missing("asymmetric"))?, ey.asym.ok_or_else(|| missing("asymmetric"))?),
        };
        let mean = term_on(tape, bound, cfg.variant, head, a, b, pairs, margin)?;
        let weighted = tape.scale(mean, S::from_f64_lossy(weight));
        match readout {
            Readout::Hybrid => parts.main = Some(weighted),
            Readout::Siamese => parts.aux_siam = Some(weighted),
            Readout::Asymmetric => parts.aux_asym = Some(weighted),
        }
        terms.push(weighted);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, parts))
}

/// Reads the weighted parts recorded by [`hybrid_loss_on`].
pub fn parts_value<S: Scalar>(tape: &Tape<S>, total: Var, parts: &LossParts<Option<Var>>) -> LossParts<f64> {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).as_f64());
    LossParts {
        total: tape.scalar(total).as_f64(),
        main: get(parts.main),
        aux_siam: get(parts.aux_siam),
        aux_asym: get(parts.aux_asym),
    }
}

/// Mean of one loss term over `pairs`, computed from plain encodings.
pub fn term_value<S: Scalar>(
    net: &HybridNetwork<S>,
    readout: Readout,
    ex: &Encodings<S>,
    ey: &Encodings<S>,
    pairs: &PairIndex,
    margin: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    match net.variant() {
        Variant::L2Hinge => {
            let m = S::from_f64_lossy(margin);
            let sum: f64 = (0..pairs.len())
                .map(|k| hinge_l2(ex.row(readout, pairs.x[k]), ey.row(readout, pairs.y[k]), pairs.matched[k], m).as_f64())
                .sum();
            Ok(sum / pairs.len() as f64)
        }
        Variant::Softmax => {
            let logits = (0..pairs.len())
                .map(|k| net.match_logits(readout, ex.row(readout, pairs.x[k]), ey.row(readout, pairs.y[k])))
                .collect::<Result<Vec<_>>>()?;
            Ok(softmax_match_loss(&logits, &pairs.matched).as_f64())
        }
    }
}

/// The weighted hybrid loss from plain encodings, without a tape.
pub fn hybrid_loss_values<S: Scalar>(
    net: &HybridNetwork<S>,
    ex: &Encodings<S>,
    ey: &Encodings<S>,
    pairs: &PairIndex,
    cfg: &LossConfig,
) -> Result<LossParts<f64>> {
    cfg.validate()?;
    cfg.check_net(net)?;
    let mut parts = LossParts::default();
    if cfg.main_weight > 0.0 {
        parts.main = cfg.main_weight * term_value(net, Readout::Hybrid, ex, ey, pairs, cfg.margin)?;
    }
    if cfg.aux_weight_siam > 0.0 {
        parts.aux_siam = cfg.aux_weight_siam * term_value(net, Readout::Siamese, ex, ey, pairs, cfg.margin)?;
    }
    if cfg.aux_weight_asym > 0.0 {
        parts.aux_asym = cfg.aux_weight_asym * term_value(net, Readout::Asymmetric, ex, ey, pairs, cfg.margin)?;
    }
    parts.total = parts.main + parts.aux_siam + parts.aux_asym;
    Ok(parts)
}
