//! The work behind each `hpn` subcommand, callable without a process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hybridnet_core::data::{pearson, synth_multimodal, NormalizationStats, PatchPair};
use hybridnet_core::eval::{evaluate, knn_match, top1_accuracy, DescriptorSet, EvalReport};
use hybridnet_core::model::{HybridNetwork, Modality, Paths, Readout, Variant};
use hybridnet_core::train::{initialized_network, train_observed, EpochRecord, SplitPart, TrainLog, TrainObserver, TrainingSet};
use hybridnet_core::PATCH_PIXELS;
use rayon::prelude::*;

use crate::bytes::write_file;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HpnError, Result};
use crate::images::{extract_manifest, read_manifest, split_to_text, Extraction};
use crate::logs::{log_to_jsonl, report_text};
use crate::{container, descriptors};

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub records: usize,
    pub positives: usize,
    /// Mean pixel correlation between the two modalities of the positives.
    pub mean_correlation: f64,
}

/// Writes a synthetic container and its `.meta` sidecar.
pub fn synth(n: usize, seed: u64, severity: f64, out: &Path) -> Result<SynthSummary> {
    let pairs = synth_multimodal(n, seed, severity)?;
    let pos: Vec<&PatchPair> = pairs.iter().filter(|p| p.label.is_match()).collect();
    let mean_correlation = pos.iter().map(|p| pearson(p.x.pixels(), p.y.pixels())).sum::<f64>() / pos.len() as f64;
    container::save(out, &pairs)?;
    let meta = format!(
        "generator = synthetic-multimodal\nn = {n}\nseed = {seed}\nseverity = {severity}\nrecords = {}\nmean_correlation = {mean_correlation}\n",
        pairs.len()
    );
    write_file(&sidecar(out, ".meta"), meta.as_bytes())?;
    Ok(SynthSummary { records: pairs.len(), positives: pos.len(), mean_correlation })
}

/// Writes the extracted container and its `.split` sidecar.
pub fn extract(manifest: &Path, grid_step: usize, seed: u64, out: &Path) -> Result<Extraction> {
    let entries = read_manifest(manifest)?;
    let ex = extract_manifest(&entries, grid_step, seed)?;
    container::save(out, &ex.pairs)?;
    write_file(&sidecar(out, ".split"), split_to_text(&ex.split).as_bytes())?;
    Ok(ex)
}

pub const CHECKPOINT_FILE: &str = "model.hybn";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Forwards epoch records to a callback and optionally measures time.
pub struct Progress<F> {
    start: Option<Instant>,
    on_epoch: F,
}

impl<F: FnMut(&EpochRecord)> Progress<F> {
    /// With `wall_clock` off every logged duration is 0, which keeps logs
    /// byte-identical across runs.
    pub fn new(wall_clock: bool, on_epoch: F) -> Self {
        Progress { start: wall_clock.then(Instant::now), on_epoch }
    }
}

impl<S, F: FnMut(&EpochRecord)> TrainObserver<S> for Progress<F> {
    fn now(&mut self) -> Option<f64> {
        self.start.map(|s| s.elapsed().as_secs_f64())
    }

    fn epoch_end(&mut self, record: &EpochRecord, _net: &HybridNetwork<S>) {
        (self.on_epoch)(record)
    }
}

/// Trains on the matching records of `data` and writes the best network,
/// the log and the resolved config into `out_dir`. On divergence the best
/// network so far is still written before the error is returned.
pub fn train(cfg: &RunConfig, data: &Path, out_dir: &Path, observer: &mut dyn TrainObserver<f32>) -> Result<TrainSummary> {
    cfg.validate()?;
    let pairs = container::load(data)?;
    let set = TrainingSet::from_pairs(&pairs, cfg.seed)?;
    let tc = cfg.train_config();
    let net = initialized_network::<f32>(cfg.variant, cfg.arch()?, &tc)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HpnError::io(out_dir, e))?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    match train_observed(net, &set, &tc, observer) {
        Ok(o) => {
            Checkpoint::new(&o.net, Some(set.stats)).save(&checkpoint)?;
            write_file(&out_dir.join(LOG_FILE), log_to_jsonl(&o.log).as_bytes())?;
            Ok(TrainSummary { checkpoint, log: o.log, best_epoch: o.best_epoch, stopped_early: o.stopped_early })
        }
        Err(f) => {
            Checkpoint::new(&f.best, Some(set.stats)).save(&checkpoint)?;
            write_file(&out_dir.join(LOG_FILE), log_to_jsonl(&f.log).as_bytes())?;
            Err(f.error.into())
        }
    }
}

/// A checkpoint load whose failures all map to the artifact exit code.
pub fn load_checkpoint(path: &Path, variant: Option<Variant>) -> Result<Checkpoint> {
    match variant {
        Some(v) => Checkpoint::load_expecting(path, v),
        None => Checkpoint::load(path),
    }
    .map_err(HpnError::artifact)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Held-out positives of the run seed plus fixed negatives.
    Test,
    /// Every record of the container as labeled.
    All,
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub cfg: &'a RunConfig,
    /// Required variant, if any.
    pub variant: Option<Variant>,
    pub readout: Readout,
    pub split: EvalSplit,
}

pub fn eval(req: &EvalRequest) -> Result<EvalReport> {
    let ck = load_checkpoint(req.checkpoint, req.variant)?;
    let pairs = container::load(req.data)?;
    let (pairs, stats) = match req.split {
        EvalSplit::Test => {
            let set = TrainingSet::from_pairs(&pairs, req.cfg.seed)?;
            (set.labeled_pairs(SplitPart::Test, req.cfg.seed)?, ck.stats.unwrap_or(set.stats))
        }
        EvalSplit::All => {
            let stats = match ck.stats {
                Some(s) => s,
                None => NormalizationStats::compute(pairs.iter().filter(|p| p.label.is_match()))?,
            };
            (pairs, stats)
        }
    };
    let id = std::fs::read(req.checkpoint).map(|b| crate::bytes::sha256_hex(&b)).map_err(|e| HpnError::io(req.checkpoint, e))?;
    Ok(evaluate(&ck.net, req.readout, &pairs, &stats, req.cfg.hash(), id)?)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_file(path, report_text(report).as_bytes())
}

/// Descriptors of one modality of the matching records of a container,
/// encoded in one pass over that modality alone.
pub fn encode_set(ck: &Checkpoint, readout: Readout, pairs: &[PatchPair], modality: Modality) -> Result<DescriptorSet> {
    let stats = match ck.stats {
        Some(s) => s,
        None => NormalizationStats::compute(pairs.iter())?,
    };
    let mut buf = vec![0f32; pairs.len() * PATCH_PIXELS];
    for (p, out) in pairs.iter().zip(buf.chunks_exact_mut(PATCH_PIXELS)) {
        let patch = match modality {
            Modality::X => &p.x,
            Modality::Y => &p.y,
        };
        stats.normalize_into(patch, modality, out);
    }
    let enc = ck.net.encode(&buf, modality, Paths::for_readout(readout))?;
    Ok(DescriptorSet::from_encodings(&enc, readout, pairs.iter().map(|p| p.source_id).collect())?)
}

pub struct MatchOutcome {
    pub queries: DescriptorSet,
    pub reference: DescriptorSet,
    pub matches: Neighbours,
    /// Present when both sets have the same size, so row `i` of one is the
    /// partner of row `i` of the other.
    pub top1: Option<f64>,
}

/// Per query, `(reference index, distance)` by ascending distance.
pub type Neighbours = Vec<Vec<(usize, f64)>>;

/// `knn_match` with the queries split across the rayon pool.
pub fn knn_match_parallel(q: &DescriptorSet, r: &DescriptorSet, k: usize) -> Result<Neighbours> {
    // Validates k and widths once, including for an empty query set.
    knn_match(&DescriptorSet::new(q.modality, q.dim, Vec::new(), Vec::new())?, r, k)?;
    let chunk = q.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let parts: Vec<Result<Neighbours>> = (0..q.len())
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + chunk).min(q.len());
            let sub = DescriptorSet::new(
                q.modality,
                q.dim,
                q.data[start * q.dim..end * q.dim].to_vec(),
                q.source_ids[start..end].to_vec(),
            )?;
            Ok(knn_match(&sub, r, k)?)
        })
        .collect();
    let mut out = Vec::with_capacity(q.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Matches the X patches of `set_x` against the Y patches of `set_y`, both
/// restricted to matching records.
pub fn match_sets(checkpoint: &Path, set_x: &Path, set_y: &Path, k: usize, readout: Readout) -> Result<MatchOutcome> {
    let ck = load_checkpoint(checkpoint, None)?;
    let positives =
        |p: &Path| -> Result<Vec<PatchPair>> { Ok(container::load(p)?.into_iter().filter(|r| r.label.is_match()).collect()) };
    let (px, py) = (positives(set_x)?, positives(set_y)?);
    if k == 0 || k > py.len() {
        return Err(HpnError::Data(format!("k = {k} is outside 1..={} (matching records in {})", py.len(), set_y.display())));
    }
    let queries = encode_set(&ck, readout, &px, Modality::X)?;
    let reference = encode_set(&ck, readout, &py, Modality::Y)?;
    let matches = knn_match_parallel(&queries, &reference, k)?;
    let top1 = (queries.len() == reference.len()).then(|| top1_accuracy(&matches));
    Ok(MatchOutcome { queries, reference, matches, top1 })
}

/// Tab-separated `query rank reference distance`, one row per neighbour.
pub fn match_table(m: &MatchOutcome) -> String {
    let mut s = String::from("query\trank\treference\tdistance\n");
    for (q, row) in m.matches.iter().enumerate() {
        for (rank, (j, d)) in row.iter().enumerate() {
            writeln!(s, "{q}\t{}\t{j}\t{d}", rank + 1).unwrap();
        }
    }
    s
}

pub fn save_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    descriptors::save(path, set)
}

/// One human-readable progress line per epoch.
pub fn progress_line(r: &EpochRecord) -> String {
    format!(
        "epoch {:>3}  lr {:<8} train {:.4} (main {:.4})  val {:.4} (main {:.4})  mined {:.2}",
        r.epoch, r.lr, r.train.total, r.train.main, r.val.total, r.val.main, r.mined_fraction
    )
}
