//! Training logs as JSON lines and evaluation reports as text.

use std::fmt::Write as _;

use hybridnet_core::eval::EvalReport;
use hybridnet_core::train::{EpochRecord, TrainLog};
use serde::{Deserialize, Serialize};

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_main: f64,
    pub train_aux_s: f64,
    pub train_aux_a: f64,
    pub val_total: f64,
    pub val_main: f64,
    pub val_aux_s: f64,
    pub val_aux_a: f64,
    pub mined_fraction: f64,
    pub seconds: f64,
}

impl From<&EpochRecord> for LogLine {
    fn from(r: &EpochRecord) -> Self {
        LogLine {
            epoch: r.epoch,
            lr: r.lr,
            train_total: r.train.total,
            train_main: r.train.main,
            train_aux_s: r.train.aux_siam,
            train_aux_a: r.train.aux_asym,
            val_total: r.val.total,
            val_main: r.val.main,
            val_aux_s: r.val.aux_siam,
            val_aux_a: r.val.aux_asym,
            mined_fraction: r.mined_fraction,
            seconds: r.seconds,
        }
    }
}

pub fn log_line(r: &EpochRecord) -> String {
    let mut s = serde_json::to_string(&LogLine::from(r)).expect("log line serializes");
    s.push('\n');
    s
}

pub fn log_to_jsonl(log: &TrainLog) -> String {
    log.records.iter().map(log_line).collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<LogLine>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// `key = value` lines followed by the ROC points, one `fpr tpr` per line.
pub fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "variant = {}", r.variant.name()).unwrap();
    writeln!(s, "fpr95 = {}", r.fpr95).unwrap();
    writeln!(s, "auc = {}", r.auc).unwrap();
    writeln!(s, "positives = {}", r.positives).unwrap();
    writeln!(s, "negatives = {}", r.negatives).unwrap();
    writeln!(s, "config_hash = {}", r.config_hash).unwrap();
    writeln!(s, "checkpoint_id = {}", r.checkpoint_id).unwrap();
    writeln!(s, "roc_points = {}", r.roc.len()).unwrap();
    for (f, t) in &r.roc {
        writeln!(s, "{f} {t}").unwrap();
    }
    s
}

/// Reads the `key = value` header of a report.
pub fn report_field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once(" = ")?;
        (k == key).then_some(v)
    })
}
