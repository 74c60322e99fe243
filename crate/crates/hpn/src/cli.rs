//! Argument parsing and dispatch for the `hpn` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridnet_core::model::{Readout, Variant};

use crate::commands::{self, EvalRequest, EvalSplit, Progress};
use crate::config::RunConfig;
use crate::error::{HpnError, Result, EXIT_USAGE};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "HPN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hpn", version, about = "Hybrid Siamese/asymmetric CNN for multimodal patch matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal patch container.
    Synth(SynthArgs),
    /// Extract lattice patch pairs from a manifest of aligned PGM images.
    Extract(ExtractArgs),
    /// Train a network on a patch container.
    Train(TrainArgs),
    /// Compute FPR95 and the ROC of a checkpoint on a container.
    Eval(EvalArgs),
    /// Nearest-neighbour matching between two patch sets.
    Match(MatchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of matching pairs; as many non-matching pairs are added.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strength of the cross-modal appearance change, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub severity: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// CSV of `image_x_path,image_y_path` rows.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = hybridnet_core::data::DEFAULT_GRID_STEP)]
    pub grid_step: usize,
    /// Seed for negative pairing and the train/validation/test split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by commands that read a run configuration.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// `key = value` file applied over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated. Applied after every other source.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Hard negative mining on.
    #[arg(long, overrides_with = "no_hm")]
    pub hm: bool,
    #[arg(long)]
    pub no_hm: bool,
    /// Auxiliary branch losses on.
    #[arg(long, overrides_with = "no_aux")]
    pub aux: bool,
    #[arg(long)]
    pub no_aux: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log real epoch durations; logs then differ between runs.
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the full report here; stdout gets only FPR95 either way.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Fail unless the checkpoint is of this variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum, default_value_t = ReadoutArg::Hybrid)]
    pub readout: ReadoutArg,
    /// `test`: held-out split of the run seed; `all`: every record.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Container whose X patches are the queries.
    #[arg(long)]
    pub set_x: PathBuf,
    /// Container whose Y patches are the reference set.
    #[arg(long)]
    pub set_y: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ReadoutArg::Hybrid)]
    pub readout: ReadoutArg,
    /// Write the match table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub export_x: Option<PathBuf>,
    #[arg(long)]
    pub export_y: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    L2,
    Softmax,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::L2 => Variant::L2Hinge,
            VariantArg::Softmax => Variant::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReadoutArg {
    Hybrid,
    Siamese,
    Asymmetric,
}

impl From<ReadoutArg> for Readout {
    fn from(r: ReadoutArg) -> Self {
        match r {
            ReadoutArg::Hybrid => Readout::Hybrid,
            ReadoutArg::Siamese => Readout::Siamese,
            ReadoutArg::Asymmetric => Readout::Asymmetric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    All,
}

/// Resolves defaults < `--config` file < `extra` < `--set` < `--seed`.
pub fn resolve_config(args: &ConfigArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut overrides: Vec<(&str, String)> = extra.to_vec();
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| HpnError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        overrides.push((k.trim(), v.to_string()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed", s.to_string()));
    }
    RunConfig::resolve(args.config.as_deref(), &overrides)
}

fn train_overrides(a: &TrainArgs) -> Vec<(&'static str, String)> {
    let mut o = Vec::new();
    if let Some(v) = a.variant {
        o.push(("variant", Variant::from(v).name().to_string()));
    }
    if a.hm {
        o.push(("hard_mining", "true".into()));
    }
    if a.no_hm {
        o.push(("hard_mining", "false".into()));
    }
    if a.aux {
        o.push(("aux", "true".into()));
    }
    if a.no_aux {
        o.push(("aux", "false".into()));
    }
    if let Some(e) = a.epochs {
        o.push(("max_epochs", e.to_string()));
    }
    if let Some(d) = &a.data {
        o.push(("data", d.display().to_string()));
    }
    if let Some(d) = &a.out {
        o.push(("out", d.display().to_string()));
    }
    o
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| HpnError::Config(format!("{what} is required (flag or config key)")))
}

/// Sizes the global rayon pool from `HPN_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HpnError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // A pool that already exists (repeated in-process calls) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    init_threads()?;
    let out_err = |e: std::io::Error| HpnError::io("<stdout>", e);
    match cli.command {
        Command::Synth(a) => {
            let s = commands::synth(a.n, a.seed, a.severity, &a.out)?;
            writeln!(stdout, "wrote {} pairs ({} matching) to {}", s.records, s.positives, a.out.display()).map_err(out_err)?;
            writeln!(stdout, "mean cross-modal correlation {:.4}", s.mean_correlation).map_err(out_err)?;
        }
        Command::Extract(a) => {
            let ex = commands::extract(&a.manifest, a.grid_step, a.seed, &a.out)?;
            for w in &ex.warnings {
                writeln!(stderr, "warning: {w}").map_err(out_err)?;
            }
            writeln!(
                stdout,
                "wrote {} pairs ({} matching) from {} image pairs to {}",
                ex.pairs.len(),
                ex.positives,
                ex.images_used,
                a.out.display()
            )
            .map_err(out_err)?;
        }
        Command::Train(a) => {
            let cfg = resolve_config(&a.cfg, &train_overrides(&a))?;
            if a.cfg.print_config {
                write!(stdout, "{}", cfg.to_text()).map_err(out_err)?;
                return Ok(());
            }
            let data = required(&cfg.data, "data")?.to_path_buf();
            let out = required(&cfg.out, "out")?.to_path_buf();
            let quiet = a.quiet;
            let mut progress = Progress::new(a.wall_clock, |r| {
                if !quiet {
                    let _ = writeln!(stderr, "{}", commands::progress_line(r));
                }
            });
            let s = commands::train(&cfg, &data, &out, &mut progress)?;
            writeln!(
                stdout,
                "best epoch {} of {}{}; checkpoint {}",
                s.best_epoch,
                s.log.len(),
                if s.stopped_early { " (early stop)" } else { "" },
                s.checkpoint.display()
            )
            .map_err(out_err)?;
        }
        Command::Eval(a) => {
            let mut extra = Vec::new();
            if let Some(d) = &a.data {
                extra.push(("data", d.display().to_string()));
            }
            let cfg = resolve_config(&a.cfg, &extra)?;
            if a.cfg.print_config {
                write!(stdout, "{}", cfg.to_text()).map_err(out_err)?;
                return Ok(());
            }
            let data = required(&cfg.data, "data")?.to_path_buf();
            let report = commands::eval(&EvalRequest {
                checkpoint: &a.checkpoint,
                data: &data,
                cfg: &cfg,
                variant: a.variant.map(Variant::from),
                readout: a.readout.into(),
                split: match a.split {
                    SplitArg::Test => EvalSplit::Test,
                    SplitArg::All => EvalSplit::All,
                },
            })?;
            if let Some(p) = &a.report {
                commands::write_report(p, &report)?;
            }
            writeln!(stdout, "{}", report.fpr95).map_err(out_err)?;
        }
        Command::Match(a) => {
            let m = commands::match_sets(&a.checkpoint, &a.set_x, &a.set_y, a.k, a.readout.into())?;
            if let Some(p) = &a.export_x {
                commands::save_descriptors(p, &m.queries)?;
            }
            if let Some(p) = &a.export_y {
                commands::save_descriptors(p, &m.reference)?;
            }
            let table = commands::match_table(&m);
            match &a.out {
                Some(p) => std::fs::write(p, table).map_err(|e| HpnError::io(p, e))?,
                None => stdout.write_all(table.as_bytes()).map_err(out_err)?,
            }
            if let Some(t) = m.top1 {
                writeln!(stderr, "top1_accuracy {t}").map_err(out_err)?;
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr());
    match run(cli, &mut out, &mut err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "hpn: error: {e}");
            e.exit_code()
        }
    }
}
