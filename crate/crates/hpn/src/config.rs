//! `key = value` run configuration.
//!
//! Values resolve in three layers: built-in defaults, then a config file,
//! then command-line overrides. [`RunConfig::to_text`] prints every key and
//! parses back to the same configuration.

use std::path::{Path, PathBuf};

use hybridnet_core::data::DEFAULT_GRID_STEP;
use hybridnet_core::loss::LossConfig;
use hybridnet_core::mining::MiningConfig;
use hybridnet_core::model::{BranchArch, Variant};
use hybridnet_core::train::{Init, TrainConfig};

use crate::bytes::sha256_hex;
use crate::error::{HpnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub init: Init,
    pub augment: bool,
    pub hard_mining: bool,
    pub h_m: f64,
    pub mining_start_epoch: usize,
    pub margin: f64,
    pub aux: bool,
    pub main_weight: f64,
    pub aux_weight_siam: f64,
    pub aux_weight_asym: f64,
    /// Every conv layer keeps `1 / width_divisor` of its channels.
    pub width_divisor: usize,
    pub grid_step: usize,
    pub severity: f64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let l = LossConfig::default();
        let m = MiningConfig::default();
        RunConfig {
            variant: l.variant,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            lr_drop_epochs: t.lr_drop_epochs,
            lr_drop_factor: t.lr_drop_factor,
            early_stop_patience: t.early_stop_patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            init: t.init,
            augment: t.augment,
            hard_mining: m.enabled,
            h_m: m.h_m,
            mining_start_epoch: t.mining_start_epoch,
            margin: l.margin,
            aux: true,
            main_weight: l.main_weight,
            aux_weight_siam: l.aux_weight_siam,
            aux_weight_asym: l.aux_weight_asym,
            width_divisor: 1,
            grid_step: DEFAULT_GRID_STEP,
            severity: 1.0,
            data: None,
            out: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "variant",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "lr_drop_epochs",
    "lr_drop_factor",
    "early_stop_patience",
    "max_epochs",
    "seed",
    "init",
    "augment",
    "hard_mining",
    "h_m",
    "mining_start_epoch",
    "margin",
    "aux",
    "main_weight",
    "aux_weight_siam",
    "aux_weight_asym",
    "width_divisor",
    "grid_step",
    "severity",
    "data",
    "out",
];

fn bad(key: &str, value: &str, expected: &str) -> HpnError {
    HpnError::Config(format!("{key} = {value:?}: expected {expected}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, expected: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, expected))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_init(key: &str, v: &str) -> Result<Init> {
    let (kind, arg) = v.split_once(':').unwrap_or((v, ""));
    let arg = |d: f64| if arg.is_empty() { Ok(d) } else { num::<f64>(key, arg, "a number after ':'") };
    match kind {
        "normal" => Ok(Init::Normal { sigma: arg(0.01)? }),
        "fan_in" => Ok(Init::FanIn { gain: arg(1.0)? }),
        _ => Err(bad(key, v, "normal:<sigma> or fan_in:<gain>")),
    }
}

fn init_text(init: &Init) -> String {
    match init {
        Init::Normal { sigma } => format!("normal:{sigma}"),
        Init::FanIn { gain } => format!("fan_in:{gain}"),
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = Variant::parse(v).ok_or_else(|| bad(key, v, "l2 or softmax"))?,
            "lr" => self.lr = num(key, v, "a number")?,
            "momentum" => self.momentum = num(key, v, "a number")?,
            "weight_decay" => self.weight_decay = num(key, v, "a number")?,
            "batch_size" => self.batch_size = num(key, v, "an integer")?,
            "lr_drop_epochs" => {
                self.lr_drop_epochs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s, "comma-separated integers"))
                    .collect::<Result<_>>()?
            }
            "lr_drop_factor" => self.lr_drop_factor = num(key, v, "a number")?,
            "early_stop_patience" => self.early_stop_patience = num(key, v, "an integer")?,
            "max_epochs" => self.max_epochs = num(key, v, "an integer")?,
            "seed" => self.seed = num(key, v, "an unsigned integer")?,
            "init" => self.init = parse_init(key, v)?,
            "augment" => self.augment = boolean(key, v)?,
            "hard_mining" => self.hard_mining = boolean(key, v)?,
            "h_m" => self.h_m = num(key, v, "a number")?,
            "mining_start_epoch" => self.mining_start_epoch = num(key, v, "an integer")?,
            "margin" => self.margin = num(key, v, "a number")?,
            "aux" => self.aux = boolean(key, v)?,
            "main_weight" => self.main_weight = num(key, v, "a number")?,
            "aux_weight_siam" => self.aux_weight_siam = num(key, v, "a number")?,
            "aux_weight_asym" => self.aux_weight_asym = num(key, v, "a number")?,
            "width_divisor" => self.width_divisor = num(key, v, "an integer")?,
            "grid_step" => self.grid_step = num(key, v, "an integer")?,
            "severity" => self.severity = num(key, v, "a number")?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(HpnError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HpnError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| HpnError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| HpnError::io(path, e))?;
        self.apply_text(&text).map_err(|e| HpnError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn value(&self, key: &str) -> Option<String> {
        Some(match key {
            "variant" => self.variant.name().to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_drop_epochs" => self.lr_drop_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
            "lr_drop_factor" => self.lr_drop_factor.to_string(),
            "early_stop_patience" => self.early_stop_patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "seed" => self.seed.to_string(),
            "init" => init_text(&self.init),
            "augment" => self.augment.to_string(),
            "hard_mining" => self.hard_mining.to_string(),
            "h_m" => self.h_m.to_string(),
            "mining_start_epoch" => self.mining_start_epoch.to_string(),
            "margin" => self.margin.to_string(),
            "aux" => self.aux.to_string(),
            "main_weight" => self.main_weight.to_string(),
            "aux_weight_siam" => self.aux_weight_siam.to_string(),
            "aux_weight_asym" => self.aux_weight_asym.to_string(),
            "width_divisor" => self.width_divisor.to_string(),
            "grid_step" => self.grid_step.to_string(),
            "severity" => self.severity.to_string(),
            "data" => opt_path(&self.data),
            "out" => opt_path(&self.out),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value(k).unwrap())).collect()
    }

    /// Hash of everything that affects training, excluding file locations.
    pub fn hash(&self) -> String {
        let text: String = KEYS
            .iter()
            .filter(|k| !matches!(**k, "data" | "out"))
            .map(|k| format!("{k} = {}\n", self.value(k).unwrap()))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn loss_config(&self) -> LossConfig {
        let aux = if self.aux { 1.0 } else { 0.0 };
        LossConfig {
            variant: self.variant,
            margin: self.margin,
            main_weight: self.main_weight,
            aux_weight_siam: aux * self.aux_weight_siam,
            aux_weight_asym: aux * self.aux_weight_asym,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            lr_drop_epochs: self.lr_drop_epochs.clone(),
            lr_drop_factor: self.lr_drop_factor,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            init: self.init,
            augment: self.augment,
            mining: MiningConfig { h_m: self.h_m, enabled: self.hard_mining },
            mining_start_epoch: self.mining_start_epoch,
            loss: self.loss_config(),
        }
    }

    pub fn arch(&self) -> Result<BranchArch> {
        Ok(BranchArch::scaled(self.variant, self.width_divisor)?)
    }

    /// Checks every value the trainer would reject, before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.arch()?;
        if self.grid_step == 0 {
            return Err(HpnError::Config("grid_step must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(HpnError::Config(format!("severity {} is outside [0, 1]", self.severity)));
        }
        Ok(())
    }
}
