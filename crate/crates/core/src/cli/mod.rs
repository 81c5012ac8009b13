//! Command-line front end: `run`, `sweep`, `analyze` and `cost`.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! failures. Outputs are rendered before anything is written, so a failed
//! command leaves no partial files behind.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::annealing::AttenuationKind;
use crate::error::{Error, Result};
use crate::heredity::HereditySpec;
use crate::pruning::{Fraction, PruneKind};

pub use commands::{
    analyze, cost, read_attention, render_cost, run, sweep, write_artifacts, AnalysisReport,
    AnalyzeOptions, Artifact, AttentionDump, CostOutcome, RunOutcome, RunSummary, SweepOutcome,
    SweepRow,
};
pub use config::{CostFile, Format, RunConfig, SweepConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "vistrim", version, about = "Visual-token trimming for decoder inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate once and write trace, summary and attention records.
    Run(RunArgs),
    /// Evaluate a grid of pruning, annealing and heredity settings.
    Sweep(SweepArgs),
    /// Layer similarity, visual share and top-k overlap from a run's records.
    Analyze(AnalyzeArgs),
    /// Analytic FLOPs and KV-cache bytes at deployment dimensions.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub n_system: Option<usize>,
    #[arg(long)]
    pub n_visual: Option<usize>,
    #[arg(long)]
    pub n_instruction: Option<usize>,
    #[command(flatten)]
    pub prune: PruneArgs,
    #[command(flatten)]
    pub attenuation: AttenuationArgs,
    /// Comma-separated lazy layers, e.g. `5,6`.
    #[arg(long)]
    pub lazy_layers: Option<HereditySpec>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub record_attention: Option<bool>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// none, pvtp, fastv_like or vtw_like.
    #[arg(long)]
    pub prune: Option<PruneKind>,
    #[arg(long)]
    pub start_layer: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Fraction or percentage, e.g. `0.1225` or `12.25%`.
    #[arg(long)]
    pub step_ratio: Option<Fraction>,
    #[arg(long)]
    pub first_ratio: Option<Fraction>,
    #[arg(long)]
    pub fastv_layer: Option<usize>,
    #[arg(long)]
    pub fastv_ratio: Option<Fraction>,
    #[arg(long)]
    pub vtw_cut_layer: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttenuationArgs {
    /// none, cosine, linear or exponential.
    #[arg(long)]
    pub attenuation: Option<AttenuationKind>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long, value_delimiter = ',')]
    pub strides: Option<Vec<usize>>,
    /// Explicit step ratios; replaces `--keep-fraction`.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<Fraction>>,
    #[arg(long)]
    pub keep_fraction: Option<Fraction>,
    #[arg(long)]
    pub first_ratio: Option<Fraction>,
    #[arg(long)]
    pub start_layer: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// One lazy set per occurrence, e.g. `--lazy-set 29,30,31`.
    #[arg(long = "lazy-set")]
    pub lazy_sets: Option<Vec<HereditySpec>>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Directory holding `attention.json` from a run.
    #[arg(long)]
    pub trace_dir: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long, default_value_t = 0)]
    pub step: usize,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub top_fraction: f64,
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write `cost.{csv,json}` here instead of printing to stdout.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub kv_bytes_per_element: Option<usize>,
    #[arg(long)]
    pub n_text: Option<usize>,
    #[arg(long)]
    pub n_visual: Option<usize>,
    #[command(flatten)]
    pub prune: PruneArgs,
    #[command(flatten)]
    pub attenuation: AttenuationArgs,
    #[arg(long)]
    pub lazy_layers: Option<HereditySpec>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    /// Solve `n_text` so the unpruned prefill costs this many FLOPs.
    #[arg(long)]
    pub calibrate_flops: Option<f64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl PruneArgs {
    fn apply(self, s: &mut crate::pruning::PruneSchedule) {
        overlay!(s.kind, self.prune);
        overlay!(s.start_layer, self.start_layer);
        overlay!(s.stride, self.stride);
        overlay!(s.step_ratio, self.step_ratio);
        overlay!(s.first_ratio, self.first_ratio);
        overlay!(s.fastv_layer, self.fastv_layer);
        overlay!(s.fastv_ratio, self.fastv_ratio);
        if self.vtw_cut_layer.is_some() {
            s.vtw_cut_layer = self.vtw_cut_layer;
        }
    }
}

impl AttenuationArgs {
    fn apply(self, a: &mut crate::annealing::AttenuationSpec) {
        overlay!(a.kind, self.attenuation);
        overlay!(a.tau, self.tau);
        overlay!(a.sigma, self.sigma);
    }
}

impl RunArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::load_toml(p)?,
            None => RunConfig::default(),
        };
        overlay!(cfg.seed, self.seed);
        overlay!(cfg.output.out_dir, self.out_dir);
        overlay!(cfg.output.format, self.format);
        overlay!(cfg.model.num_layers, self.num_layers);
        overlay!(cfg.model.model_dim, self.model_dim);
        overlay!(cfg.model.num_heads, self.num_heads);
        overlay!(cfg.model.mlp_dim, self.mlp_dim);
        overlay!(cfg.model.vocab_size, self.vocab_size);
        overlay!(cfg.model.max_positions, self.max_positions);
        overlay!(cfg.prompt.n_system, self.n_system);
        overlay!(cfg.prompt.n_visual, self.n_visual);
        overlay!(cfg.prompt.n_instruction, self.n_instruction);
        overlay!(cfg.heredity.lazy_layers, self.lazy_layers);
        overlay!(cfg.generation.max_new_tokens, self.max_new_tokens);
        overlay!(cfg.generation.record_attention, self.record_attention);
        self.prune.apply(&mut cfg.prune);
        self.attenuation.apply(&mut cfg.attenuation);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SweepArgs {
    pub fn resolve(self) -> Result<SweepConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::load_toml(p)?,
            None => SweepConfig::default(),
        };
        overlay!(cfg.seed, self.seed);
        overlay!(cfg.output.out_dir, self.out_dir);
        overlay!(cfg.output.format, self.format);
        overlay!(cfg.grid.strides, self.strides);
        if let Some(r) = self.ratios {
            cfg.grid.ratios = r;
            cfg.grid.keep_fraction = None;
        }
        if let Some(c) = self.keep_fraction {
            cfg.grid.keep_fraction = Some(c);
            cfg.grid.ratios.clear();
        }
        overlay!(cfg.grid.first_ratio, self.first_ratio);
        overlay!(cfg.grid.start_layer, self.start_layer);
        overlay!(cfg.grid.taus, self.taus);
        overlay!(cfg.grid.lazy_sets, self.lazy_sets);
        overlay!(cfg.generation.max_new_tokens, self.max_new_tokens);
        config::check_version(cfg.version)?;
        Ok(cfg)
    }
}

impl CostArgs {
    pub fn resolve(self) -> Result<CostFile> {
        let mut f = match &self.config {
            Some(p) => config::load_toml(p)?,
            None => CostFile::default(),
        };
        overlay!(f.cost.num_layers, self.num_layers);
        overlay!(f.cost.model_dim, self.model_dim);
        overlay!(f.cost.mlp_dim, self.mlp_dim);
        overlay!(f.cost.batch, self.batch);
        overlay!(f.cost.kv_bytes_per_element, self.kv_bytes_per_element);
        overlay!(f.cost.n_text, self.n_text);
        overlay!(f.cost.n_visual, self.n_visual);
        overlay!(f.heredity.lazy_layers, self.lazy_layers);
        overlay!(f.gen_len, self.gen_len);
        if self.calibrate_flops.is_some() {
            f.calibrate_flops = self.calibrate_flops;
        }
        self.prune.apply(&mut f.prune);
        self.attenuation.apply(&mut f.attenuation);
        config::check_version(f.version)?;
        Ok(f)
    }
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = run(&cfg)?;
            write_artifacts(&cfg.output.out_dir, &out.artifacts)?;
            eprintln!(
                "{}: {} tokens, {} ops -> {}",
                out.summary.policy,
                out.trace.tokens.len(),
                out.summary.engine_ops,
                cfg.output.out_dir.display()
            );
        }
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            let out = sweep(&cfg)?;
            write_artifacts(&cfg.output.out_dir, &out.artifacts)?;
            let ok = out.rows.iter().filter(|r| r.status == "ok").count();
            eprintln!("{ok}/{} grid points ok -> {}", out.rows.len(), cfg.output.out_dir.display());
        }
        Command::Analyze(args) => {
            let dump = read_attention(&args.trace_dir)?;
            let opts = AnalyzeOptions {
                step: args.step,
                layer: args.layer,
                top_fraction: args.top_fraction,
                threshold: args.threshold,
                format: args.format,
            };
            let (_, artifacts) = analyze(&dump, &opts)?;
            let dir = args.out_dir.unwrap_or(args.trace_dir);
            write_artifacts(&dir, &artifacts)?;
        }
        Command::Cost(args) => {
            let out_dir = args.out_dir.clone();
            let format = args.format;
            let file = args.resolve()?;
            let artifact = render_cost(&cost(&file)?, format)?;
            match out_dir {
                Some(dir) => {
                    write_artifacts(&dir, &[artifact])?;
                }
                None => std::io::stdout().write_all(&artifact.contents)?,
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the selected command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn main() -> ExitCode {
    run_from(std::env::args_os())
}
