//! SGD with momentum, the step learning-rate schedule, early stopping on
//! validation loss and the ablation arms.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{negative_indices, DatasetSplit, Flips, NormalizationStats, PatchPair};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss_on, hybrid_loss_values, parts_value, LossConfig, LossParts, PairIndex};
use crate::mining::{mine_from_encodings, MiningConfig};
use crate::model::{BranchArch, EncodedVars, Encodings, HybridNetwork, Modality, Readout, Variant};
use crate::rng::{shuffle, stream, DetRng};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{DESCRIPTOR_DIM, PATCH_PIXELS, PATCH_SIZE};

/// Independent random streams derived from the run seed.
mod streams {
    pub const INIT: u64 = 0;
    pub const ORDER: u64 = 1;
    pub const FLIPS: u64 = 2;
    pub const MINING: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const TEST: u64 = 5;
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Every weight from N(0, σ²).
    Normal { sigma: f64 },
    /// Per-layer σ = gain · sqrt(2 / fan_in).
    FanIn { gain: f64 },
}

/// Normal weights scaled per layer to fan-in. A single small σ for every
/// layer leaves the deep outputs nearly constant and training stalls.
impl Default for Init {
    fn default() -> Self {
        Init::FanIn { gain: 1.0 }
    }
}

impl Init {
    pub fn apply<S: Scalar>(&self, net: &mut HybridNetwork<S>, seed: u64) -> Result<()> {
        match *self {
            Init::Normal { sigma } => net.init_params(seed, sigma),
            Init::FanIn { gain } => net.init_fan_in(seed, gain),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// The rate is multiplied by `lr_drop_factor` once each of these many
    /// epochs has completed.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub init: Init,
    /// Flip augmentation of training batches.
    pub augment: bool,
    pub mining: MiningConfig,
    /// First epoch (1-based) whose batches are mined. Mining a network
    /// that has not yet learned anything keeps it from learning at all.
    pub mining_start_epoch: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 128,
            lr_drop_epochs: vec![75, 95],
            lr_drop_factor: 0.1,
            early_stop_patience: 10,
            max_epochs: 120,
            seed: 0,
            init: Init::default(),
            augment: true,
            mining: MiningConfig::default(),
            mining_start_epoch: 6,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("{} is outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", format!("{} must be non-negative", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", format!("{} is below 2", self.batch_size)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::invalid("lr_drop_factor", format!("{} must be positive", self.lr_drop_factor)));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::invalid("early_stop_patience", "must be at least 1"));
        }
        self.mining.validate()?;
        self.loss.validate()
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch > d).count();
        let mut lr = self.lr;
        for _ in 0..drops {
            lr *= self.lr_drop_factor;
        }
        lr
    }
}

/// Hyperparameters of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Per-parameter velocities, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<S> {
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(params: &[&Tensor<S>]) -> Self {
        SgdState { velocity: params.iter().map(|t| vec![S::zero(); t.len()]).collect() }
    }

    pub fn for_network(net: &HybridNetwork<S>) -> Self {
        Self::new(&net.tensors())
    }

    pub fn velocity(&self, i: usize) -> &[S] {
        &self.velocity[i]
    }

    pub fn velocity_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.velocity[i]
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`. One-dimensional tensors are
/// biases and get no decay. Tensors without a gradient buffer are skipped.
pub fn sgd_step<S: Scalar>(params: &mut [&mut Tensor<S>], state: &mut SgdState<S>, hp: SgdParams) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::DimensionMismatch {
            what: "sgd parameter list",
            left: vec![params.len()],
            right: vec![state.velocity.len()],
        });
    }
    for (t, v) in params.iter().zip(&state.velocity) {
        if t.grad().is_some_and(|g| g.len() != t.len()) || v.len() != t.len() {
            return Err(Error::shape("sgd_step", format!("parameter {:?} has velocity of length {}", t.shape(), v.len())));
        }
    }
    let lr = S::from_f64_lossy(hp.lr);
    let m = S::from_f64_lossy(hp.momentum);
    for (t, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
        let wd = if t.shape().len() == 1 { S::zero() } else { S::from_f64_lossy(hp.weight_decay) };
        for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = m * *vi + (gi + wd * *p);
            *p -= lr * *vi;
        }
    }
    Ok(())
}

/// Counts epochs without improvement of the monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 0 until the first observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts<f64>,
    pub val: LossParts<f64>,
    /// Mined negatives over all training negatives of the epoch.
    pub mined_fraction: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Positive pairs with their split and the training-split statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub positives: Vec<PatchPair>,
    pub split: DatasetSplit,
    pub stats: NormalizationStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl TrainingSet {
    /// Keeps the matching records of `pairs`, splits them under `seed` and
    /// computes normalization statistics on the training part.
    pub fn from_pairs(pairs: &[PatchPair], seed: u64) -> Result<Self> {
        let positives: Vec<PatchPair> = pairs.iter().filter(|p| p.label.is_match()).cloned().collect();
        let split = DatasetSplit::new(positives.len(), seed)?;
        Self::with_split(positives, split)
    }

    pub fn with_split(positives: Vec<PatchPair>, split: DatasetSplit) -> Result<Self> {
        if split.len() != positives.len() {
            return Err(Error::DimensionMismatch { what: "split size", left: vec![split.len()], right: vec![positives.len()] });
        }
        if let Some(bad) = positives.iter().position(|p| !p.label.is_match()) {
            return Err(Error::invalid("positives", format!("record {bad} is not a matching pair")));
        }
        let stats = NormalizationStats::compute(split.train.iter().map(|&i| &positives[i]))?;
        Ok(TrainingSet { positives, split, stats })
    }

    pub fn indices(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.split.train,
            SplitPart::Validation => &self.split.validation,
            SplitPart::Test => &self.split.test,
        }
    }

    /// The positives of a split followed by one fixed random negative per
    /// positive, paired within the split.
    pub fn labeled_pairs(&self, part: SplitPart, seed: u64) -> Result<Vec<PatchPair>> {
        let idx = self.indices(part);
        let which = match part {
            SplitPart::Train => streams::ORDER,
            SplitPart::Validation => streams::VALIDATION,
            SplitPart::Test => streams::TEST,
        };
        let negatives = negative_indices(idx.len(), &mut stream(seed, which))?;
        let mut out: Vec<PatchPair> = idx.iter().map(|&i| self.positives[i].clone()).collect();
        for (a, b) in negatives {
            out.push(PatchPair {
                x: self.positives[idx[a]].x.clone(),
                y: self.positives[idx[b]].y.clone(),
                label: crate::data::Label::NonMatch,
                source_id: self.positives[idx[a]].source_id,
            });
        }
        Ok(out)
    }
}

/// Normalized X and Y batches for a list of pairs.
pub fn normalize_batch<S: Scalar>(pairs: &[PatchPair], stats: &NormalizationStats) -> (Vec<S>, Vec<S>) {
    let mut x = vec![S::zero(); pairs.len() * PATCH_PIXELS];
    let mut y = vec![S::zero(); pairs.len() * PATCH_PIXELS];
    for (k, p) in pairs.iter().enumerate() {
        let r = k * PATCH_PIXELS..(k + 1) * PATCH_PIXELS;
        stats.normalize_into(&p.x, Modality::X, &mut x[r.clone()]);
        stats.normalize_into(&p.y, Modality::Y, &mut y[r]);
    }
    (x, y)
}

/// Loss of a fixed labeled pair list: each pair is encoded once per
/// modality and scored as `(i, i)`.
pub fn evaluation_loss<S: Scalar>(
    net: &HybridNetwork<S>,
    pairs: &[PatchPair],
    stats: &NormalizationStats,
    cfg: &LossConfig,
) -> Result<LossParts<f64>> {
    if pairs.is_empty() {
        return Err(Error::TooFew { what: "evaluation pairs", needed: 1, got: 0 });
    }
    let paths = cfg.paths();
    let (x, y) = normalize_batch::<S>(pairs, stats);
    let ex = net.encode(&x, Modality::X, paths)?;
    let ey = net.encode(&y, Modality::Y, paths)?;
    let mut index = PairIndex::default();
    for (k, p) in pairs.iter().enumerate() {
        index.push(k, k, p.label.is_match());
    }
    hybrid_loss_values(net, &ex, &ey, &index, cfg)
}

fn encodings_from_tape<S: Scalar>(tape: &Tape<S>, enc: &EncodedVars, n: usize) -> Encodings<S> {
    let read = |v: Option<crate::tape::Var>| v.map_or_else(|| vec![S::zero(); n * DESCRIPTOR_DIM], |v| tape.value(v).to_vec());
    Encodings { modality: enc.modality, n, siam: read(enc.siam), asym: read(enc.asym), hybrid: read(enc.hybrid) }
}

/// Callbacks from the training loop.
pub trait TrainObserver<S> {
    /// Seconds since an arbitrary origin; `None` logs zero durations.
    fn now(&mut self) -> Option<f64> {
        None
    }

    /// Training-set indices of each batch, before augmentation.
    fn batch_start(&mut self, _epoch: usize, _batch: &[usize]) {}

    fn epoch_end(&mut self, _record: &EpochRecord, _net: &HybridNetwork<S>) {}
}

pub struct Silent;

impl<S> TrainObserver<S> for Silent {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<S> {
    /// Parameters of the best validation epoch (the input network when no
    /// epoch ran).
    pub net: HybridNetwork<S>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// A failed run; `best` is the last network with the best validation loss.
#[derive(Debug, Clone)]
pub struct TrainFailure<S> {
    pub error: Error,
    pub best: HybridNetwork<S>,
    pub log: TrainLog,
}

pub fn train<S: Scalar>(
    net: HybridNetwork<S>,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> core::result::Result<TrainOutcome<S>, Box<TrainFailure<S>>> {
    train_observed(net, data, cfg, &mut Silent)
}

pub fn train_observed<S: Scalar>(
    mut net: HybridNetwork<S>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<S>,
) -> core::result::Result<TrainOutcome<S>, Box<TrainFailure<S>>> {
    let mut best = net.clone();
    let mut log = TrainLog::default();
    let fail = |error: Error, best: HybridNetwork<S>, log: TrainLog| Box::new(TrainFailure { error, best, log });

    if let Err(e) = cfg.validate() {
        return Err(fail(e, best, log));
    }
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome { net, log, best_epoch: 0, stopped_early: false });
    }
    if data.split.train.len() < 2 || data.split.validation.len() < 2 {
        let e = Error::TooFew {
            what: "training and validation pairs",
            needed: 2,
            got: data.split.train.len().min(data.split.validation.len()),
        };
        return Err(fail(e, best, log));
    }
    let validation = match data.labeled_pairs(SplitPart::Validation, cfg.seed) {
        Ok(v) => v,
        Err(e) => return Err(fail(e, best, log)),
    };

    let mut order_rng = stream(cfg.seed, streams::ORDER);
    let mut flip_rng = stream(cfg.seed, streams::FLIPS);
    let mut mining_rng = stream(cfg.seed, streams::MINING);
    let mut state = SgdState::for_network(&net);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut stopped_early = false;
    let mut order = data.split.train.clone();

    for epoch in 1..=cfg.max_epochs {
        let started = observer.now();
        let lr = cfg.lr_at(epoch);
        let hp = SgdParams { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        shuffle(&mut order_rng, &mut order);
        let mut train_sum = LossParts::<f64>::default();
        let (mut weight, mut mined, mut negatives) = (0usize, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2).enumerate() {
            observer.batch_start(epoch, batch);
            let step = run_batch(&mut net, data, batch, cfg, epoch, hp, &mut state, &mut flip_rng, &mut mining_rng);
            let (parts, m) = match step {
                Ok(v) => v,
                Err(Error::Diverged { .. }) => {
                    return Err(fail(Error::Diverged { epoch, batch: b + 1 }, best, log));
                }
                Err(e) => return Err(fail(e, best, log)),
            };
            train_sum = train_sum.add(&parts.scaled(batch.len() as f64));
            weight += batch.len();
            mined += m;
            negatives += batch.len();
        }
        let val = match evaluation_loss(&net, &validation, &data.stats, &cfg.loss) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Err(fail(Error::Diverged { epoch, batch: 0 }, best, log)),
            Err(e) => return Err(fail(e, best, log)),
        };
        let seconds = match (started, observer.now()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train: train_sum.scaled(1.0 / weight.max(1) as f64),
            val,
            mined_fraction: if negatives == 0 { 0.0 } else { mined as f64 / negatives as f64 },
            seconds,
        };
        observer.epoch_end(&record, &net);
        log.records.push(record);
        match stopper.observe(epoch, val.total) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { net: best, log, best_epoch: stopper.best_epoch(), stopped_early })
}

/// One optimizer step; returns the unweighted-by-size batch loss parts and
/// the number of mined negatives.
#[allow(clippy::too_many_arguments)]
fn run_batch<S: Scalar>(
    net: &mut HybridNetwork<S>,
    data: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    hp: SgdParams,
    state: &mut SgdState<S>,
    flip_rng: &mut DetRng,
    mining_rng: &mut DetRng,
) -> Result<(LossParts<f64>, usize)> {
    let n = batch.len();
    let pairs: Vec<PatchPair> = batch
        .iter()
        .map(|&i| {
            let p = &data.positives[i];
            if cfg.augment {
                crate::data::apply_flips(p, Flips::sample(flip_rng))
            } else {
                p.clone()
            }
        })
        .collect();
    let (x, y) = normalize_batch::<S>(&pairs, &data.stats);

    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, cfg.loss.paths());
    let xv = tape.constant(&[n, 1, PATCH_SIZE, PATCH_SIZE], x)?;
    let yv = tape.constant(&[n, 1, PATCH_SIZE, PATCH_SIZE], y)?;
    let ex = net.encode_on(&mut tape, &bound, xv, Modality::X)?;
    let ey = net.encode_on(&mut tape, &bound, yv, Modality::Y)?;

    // The forward values above are the frozen pre-step encodings, so they
    // serve as the mining pass.
    let mine = cfg.mining.enabled && epoch >= cfg.mining_start_epoch;
    let (negatives, mined) = if mine {
        let readout = cfg.loss.readout();
        let cx = encodings_from_tape(&tape, &ex, n);
        let cy = encodings_from_tape(&tape, &ey, n);
        let out = mine_from_encodings(net, readout, &cx, &cy, &cfg.mining, mining_rng)?;
        let m = out.mined_count();
        (out.pairs, m)
    } else {
        (negative_indices(n, mining_rng)?, 0)
    };
    let index = PairIndex::positives_then(n, &negatives);
    let (total, parts) = hybrid_loss_on(&mut tape, net, &bound, &ex, &ey, &index, &cfg.loss)?;
    let values = parts_value(&tape, total, &parts);
    if !values.is_finite() {
        return Err(Error::Diverged { epoch, batch: 0 });
    }
    tape.backward(total)?;
    net.zero_grads();
    net.accumulate_grads(&tape, &bound)?;
    if net.tensors().iter().any(|t| !t.all_finite()) {
        return Err(Error::Diverged { epoch, batch: 0 });
    }
    let mut params = net.tensors_mut();
    sgd_step(&mut params, state, hp)?;
    net.zero_grads();
    Ok((values, mined))
}

/// The four architecture arms compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    SiameseOnly,
    AsymmetricOnly,
    Hybrid,
    HybridAux,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SiameseOnly, Arm::AsymmetricOnly, Arm::Hybrid, Arm::HybridAux];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SiameseOnly => "siamese",
            Arm::AsymmetricOnly => "asymmetric",
            Arm::Hybrid => "hybrid",
            Arm::HybridAux => "hybrid-aux",
        }
    }

    /// Loss weights for the arm: single-branch arms train one branch
    /// output as their only loss.
    pub fn loss_config(self, variant: Variant, margin: f64) -> LossConfig {
        let (main, s, a) = match self {
            Arm::SiameseOnly => (0.0, 1.0, 0.0),
            Arm::AsymmetricOnly => (0.0, 0.0, 1.0),
            Arm::Hybrid => (1.0, 0.0, 0.0),
            Arm::HybridAux => (1.0, 1.0, 1.0),
        };
        LossConfig { variant, margin, main_weight: main, aux_weight_siam: s, aux_weight_asym: a }
    }

    pub fn readout(self) -> Readout {
        match self {
            Arm::SiameseOnly => Readout::Siamese,
            Arm::AsymmetricOnly => Readout::Asymmetric,
            Arm::Hybrid | Arm::HybridAux => Readout::Hybrid,
        }
    }

    /// The matching loss of the arm's readout, comparable across arms: the
    /// main term for hybrid arms, the single trained term otherwise.
    pub fn comparable_loss(self, parts: &LossParts<f64>) -> f64 {
        match self {
            Arm::SiameseOnly => parts.aux_siam,
            Arm::AsymmetricOnly => parts.aux_asym,
            Arm::Hybrid | Arm::HybridAux => parts.main,
        }
    }
}

/// Initializes a network from the run seed and trains one ablation arm.
/// Everything except the loss weights is taken from `cfg`.
pub fn ablation_run<S: Scalar>(
    data: &TrainingSet,
    arm: Arm,
    variant: Variant,
    arch: BranchArch,
    cfg: &TrainConfig,
) -> core::result::Result<TrainOutcome<S>, Box<TrainFailure<S>>> {
    let mut cfg = cfg.clone();
    cfg.loss = arm.loss_config(variant, cfg.loss.margin);
    match initialized_network(variant, arch.clone(), &cfg) {
        Ok(net) => train(net, data, &cfg),
        Err(error) => {
            Err(Box::new(TrainFailure { error, best: HybridNetwork::with_arch(variant, arch), log: TrainLog::default() }))
        }
    }
}

/// Network initialized the way [`ablation_run`] does it.
pub fn initialized_network<S: Scalar>(variant: Variant, arch: BranchArch, cfg: &TrainConfig) -> Result<HybridNetwork<S>> {
    let mut net = HybridNetwork::with_arch(variant, arch);
    cfg.init.apply(&mut net, cfg.seed ^ streams::INIT)?;
    Ok(net)
}
