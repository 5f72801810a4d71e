//! Command-line front end. Exit codes: 0 success, 1 usage or config error,
//! 2 numeric abort.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diag::{entropy_comparison, msign_diagnostics, ShapeSpec};
use crate::error::{Error, Result};
use crate::linalg::MsignMode;
use crate::optim::OptimizerConfig;
use crate::qkclip::ClipVariant;
use crate::rng::Rng;
use crate::train::{run_ablation, train, OptimizerKind, TrainConfig, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mclk";
pub const DEFAULT_OUT: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "muonclip", version, about = "Muon + QK-Clip training and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON training config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's paths, else `out/`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress stdout. Output files are unaffected.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config, writing metrics and a final checkpoint.
    Train,
    /// Muon vs MuonClip twin runs from a muon config.
    Ablate,
    /// Short MuonClip run printing the max logit per step.
    ClipDemo {
        /// Overrides the config's clip variant.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Singular values of msign outputs against the exact polar factor.
    DiagMsign {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, value_enum, default_value = "quintic")]
        mode: ModeArg,
        /// Newton-Schulz iterations (default 5 quintic, 30 cubic).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Update entropy of Muon vs AdamW on a rank-1-dominated gradient stream.
    DiagEntropy {
        #[arg(long, default_value_t = 16)]
        rows: usize,
        #[arg(long, default_value_t = 32)]
        cols: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Std of the Gaussian noise added to the rank-1 signal.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, value_enum, default_value = "exact")]
        mode: ModeArg,
        #[arg(long)]
        iters: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    #[arg(long, requires = "cols")]
    pub rows: Option<usize>,
    #[arg(long, requires = "rows")]
    pub cols: Option<usize>,
    /// Random shapes up to this size when rows/cols are not given.
    #[arg(long, default_value_t = 16)]
    pub max_dim: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Exact,
    Cubic,
    Quintic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    PerHead,
    GlobalNaive,
}

impl ModeArg {
    fn resolve(self, iters: Option<usize>) -> MsignMode {
        match self {
            ModeArg::Exact => MsignMode::ExactSvd,
            ModeArg::Cubic => MsignMode::NewtonSchulzCubic {
                iterations: iters.unwrap_or(30),
            },
            ModeArg::Quintic => MsignMode::NewtonSchulzQuintic {
                iterations: iters.unwrap_or(5),
            },
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    let mut sink = std::io::sink();
    let out: &mut dyn Write = if cli.global.quiet { &mut sink } else { stdout };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train(&cli.global, out),
        Command::Ablate => cmd_ablate(&cli.global, out),
        Command::ClipDemo { variant } => cmd_clip_demo(&cli.global, *variant, out),
        Command::DiagMsign {
            shape,
            mode,
            iters,
            trials,
        } => cmd_diag_msign(&cli.global, shape, mode.resolve(*iters), *trials, out),
        Command::DiagEntropy {
            rows,
            cols,
            steps,
            noise,
            mode,
            iters,
        } => cmd_diag_entropy(&cli.global, (*rows, *cols), *steps, *noise, mode.resolve(*iters), out),
    }
}

/// Reads the config, applies `--seed` and `--out`, and fills in default output paths.
fn load_config(g: &GlobalArgs) -> Result<TrainConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = TrainConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let dir = g.out.clone();
    let default_dir = || PathBuf::from(DEFAULT_OUT);
    if dir.is_some() || cfg.output.metrics.is_none() {
        cfg.output.metrics = Some(dir.clone().unwrap_or_else(default_dir).join(METRICS_FILE));
    }
    if dir.is_some() || cfg.output.checkpoint.is_none() {
        cfg.output.checkpoint = Some(dir.unwrap_or_else(default_dir).join(CHECKPOINT_FILE));
    }
    Ok(cfg)
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_deref().map_or_else(|| "-".into(), |p: &Path| p.display().to_string())
}

fn io(e: std::io::Error) -> Error {
    Error::Io {
        path: "<stdout>".into(),
        source: e,
    }
}

fn cmd_train(g: &GlobalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(g)?;
    let report = train(&cfg)?;
    writeln!(
        out,
        "trained {} steps: final loss {:.4} (first-window mean {:.4}), {} clip events; metrics {}, checkpoint {}",
        report.rows.len(),
        report.final_loss,
        report.initial_loss,
        report.events.len(),
        show(&cfg.output.metrics),
        show(&cfg.output.checkpoint)
    )
    .map_err(io)
}

fn cmd_ablate(g: &GlobalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(g)?;
    let r = run_ablation(&cfg)?;
    let s = &r.muonclip.clip_stats;
    let summary = serde_json::json!({
        "steps": cfg.steps,
        "tau": cfg.clip.tau.to_string(),
        "final_loss_muon": r.muon.final_loss,
        "final_loss_muonclip": r.muonclip.final_loss,
        "final_rel_diff": r.final_rel_diff,
        "identical": r.identical,
        "clip_stats": s,
        "loss_deltas": r.loss_deltas,
    });
    if let Some(dir) = cfg.output.metrics.as_deref().and_then(Path::parent) {
        let path = dir.join("ablation.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("json"))
            .map_err(|e| Error::io(&path, e))?;
    }
    writeln!(
        out,
        "muon final {:.4} | muonclip final {:.4} | rel diff {:.4}% | heads clipped {}/{} ({:.1}%) | events {} | identical {}",
        r.muon.final_loss,
        r.muonclip.final_loss,
        100.0 * r.final_rel_diff,
        s.heads_triggered,
        s.total_heads,
        100.0 * s.fraction,
        r.muonclip.events.len(),
        r.identical
    )
    .map_err(io)
}

fn cmd_clip_demo(g: &GlobalArgs, variant: Option<VariantArg>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(g)?;
    if cfg.optimizer_kind != OptimizerKind::MuonClip {
        return Err(Error::Config(format!(
            "clip-demo needs optimizer_kind muonclip, got {:?}",
            cfg.optimizer_kind
        )));
    }
    match variant {
        Some(VariantArg::PerHead) => cfg.clip.variant = ClipVariant::PerHead,
        Some(VariantArg::GlobalNaive) => cfg.clip.variant = ClipVariant::GlobalNaive,
        None => {}
    }
    let mut tr = Trainer::new(cfg.clone())?;
    if let Some(p) = &cfg.output.metrics {
        tr.open_metrics(p, false)?;
    }
    let tau = cfg.clip.tau;
    writeln!(out, "{:>6}  {:>12}  {:>6}  {:>10}", "step", "max_smax", "clips", "loss").map_err(io)?;
    let mut worst_after_first = f64::NEG_INFINITY;
    for _ in 0..cfg.steps {
        let row = tr.step()?;
        let m = row.max_smax();
        if row.step > 1 {
            worst_after_first = worst_after_first.max(m);
        }
        writeln!(out, "{:>6}  {:>12.6}  {:>6}  {:>10.5}", row.step, m, row.clip_events, row.loss).map_err(io)?;
    }
    if let Some(p) = &cfg.output.checkpoint {
        tr.save_checkpoint(p)?;
    }
    let ev = tr.events();
    if ev.is_empty() {
        return writeln!(out, "no clip events (tau {tau})").map_err(io);
    }
    let heads: std::collections::BTreeSet<_> = ev.iter().map(|e| (e.layer, e.head)).collect();
    let last = ev.iter().map(|e| e.step).max().unwrap_or(0);
    writeln!(
        out,
        "{} clip events on {} heads, last at step {last}; max s_max after step 1: {:.6} (tau {tau}, {:?})",
        ev.len(),
        heads.len(),
        worst_after_first,
        cfg.clip.variant
    )
    .map_err(io)
}

fn cmd_diag_msign(g: &GlobalArgs, shape: &ShapeArgs, mode: MsignMode, trials: usize, out: &mut dyn Write) -> Result<()> {
    let spec = match (shape.rows, shape.cols) {
        (Some(r), Some(c)) => ShapeSpec::Fixed(r, c),
        _ => ShapeSpec::UpTo(shape.max_dim),
    };
    let mut rng = Rng::new(g.seed.unwrap_or(0));
    let d = msign_diagnostics(spec, mode, trials, &mut rng)?;
    writeln!(
        out,
        "mode {mode:?} over {} matrices ({spec:?}): sigma in [{:.3e}, {:.3e}], max |sigma-1| {:.3e}, max ||O - O_exact||_F {:.3e}",
        d.trials, d.sigma_min, d.sigma_max, d.max_sigma_dev, d.max_dist_to_exact
    )
    .map_err(io)
}

fn cmd_diag_entropy(
    g: &GlobalArgs,
    (rows, cols): (usize, usize),
    steps: usize,
    noise: f64,
    mode: MsignMode,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = OptimizerConfig {
        msign_mode: mode,
        ..OptimizerConfig::default()
    };
    let r = entropy_comparison(rows, cols, steps, noise, &cfg, g.seed.unwrap_or(0))?;
    let verdict = if r.muon_mean >= r.adamw_mean { "muon >= adamw" } else { "muon < adamw" };
    writeln!(
        out,
        "{rows}x{cols}, {steps} steps, noise {noise}: mean update entropy muon {:.9} | adamw {:.9} | ln(min(n,m)) {:.9} | {verdict}",
        r.muon_mean, r.adamw_mean, r.max_entropy
    )
    .map_err(io)
}
