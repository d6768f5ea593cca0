//! Command-line surface: `compress`, `synth`, `needle` and `report`.
//!
//! Exit codes: 0 success, 1 output could not be written, 2 malformed input,
//! 3 invalid configuration or arguments, 4 budget infeasible.

pub mod format;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpe::FpeConfig;
use crate::numerics::AdapterSpec;
use crate::pipeline::{compress, CompressionConfig, StageToggles};
use crate::stc::AnchorStrategy;
use crate::synthbench::{
    aggregate, anchor_ablation, calibrated_corpus, gen_video, orthogonal_corpus, reduction_report,
    render_ablation_table, run_needle_grid, static_corpus, summarize_cells, AnchorAblationRow,
    NeedleAggregate, NeedleCellSummary, NeedleSpec, ReductionReport, SynthSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_MALFORMED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "longvid",
    version,
    about = "Compress long-video feature tokens under a context budget"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress an LVUF feature file against an LVUQ query into an LVUC file.
    Compress(CompressArgs),
    /// Write a synthetic LVUF video.
    Synth(SynthArgs),
    /// Run the needle-in-a-haystack retention grid.
    Needle(NeedleArgs),
    /// Frame keep-rate and STC token-reduction distributions over a synthetic corpus.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Temporal,
    Query,
    Stc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Anchor {
    First,
    Middle,
    HighChange,
}

impl From<Anchor> for AnchorStrategy {
    fn from(a: Anchor) -> Self {
        match a {
            Anchor::First => Self::First,
            Anchor::Middle => Self::Middle,
            Anchor::HighChange => Self::HighChange,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Corpus {
    Calibrated,
    Static,
    Orthogonal,
}

/// Pipeline knobs shared by every command that runs `compress`.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Total token budget, query included.
    #[arg(long, default_value_t = 8192, value_parser = positive)]
    pub context_length: usize,
    #[arg(long, default_value = "12x12", value_parser = parse_grid)]
    pub tokens_high: (usize, usize),
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    pub tokens_low: (usize, usize),
    /// Temporal reduction window length.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub window_j: usize,
    /// STC window length.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub window_k: usize,
    /// STC similarity threshold, in (0, 1).
    #[arg(long, default_value_t = 0.8, value_parser = open_unit)]
    pub theta: f64,
    /// Temporal similarity threshold, in (0, 1].
    #[arg(long, default_value_t = 0.85, value_parser = half_open_unit)]
    pub tau_t: f64,
    #[arg(long, value_enum, default_value_t = Anchor::First)]
    pub anchor: Anchor,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub fpe: Switch,
    /// Skip a stage; repeat for several.
    #[arg(long, value_enum)]
    pub disable_stage: Vec<Stage>,
}

impl PipelineArgs {
    /// Validated config with FPE off; see [`PipelineArgs::fpe`].
    pub fn config(&self) -> Result<CompressionConfig> {
        let cfg = CompressionConfig {
            l_max: self.context_length,
            tokens_high: self.tokens_high,
            tokens_low: self.tokens_low,
            j: self.window_j,
            k: self.window_k,
            theta: self.theta,
            tau_t: self.tau_t,
            anchor: self.anchor.into(),
            adapter: AdapterSpec::Identity,
            fpe: FpeConfig::default(),
            min_full_res_frames: 0,
            stages: StageToggles {
                temporal: !self.disable_stage.contains(&Stage::Temporal),
                query: !self.disable_stage.contains(&Stage::Query),
                stc: !self.disable_stage.contains(&Stage::Stc),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fpe(&self, token_dim: usize) -> FpeConfig {
        match self.fpe {
            Switch::On => FpeConfig::enabled(token_dim),
            Switch::Off => FpeConfig::default(),
        }
    }

    pub fn config_for_dim(&self, token_dim: usize) -> Result<CompressionConfig> {
        let mut cfg = self.config()?;
        cfg.fpe = self.fpe(token_dim);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the stats as JSON here.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    /// Per-token Gaussian noise sigma.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Fraction of scenes that drift.
    #[arg(long, default_value_t = 0.4)]
    pub drift: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value = "12x12", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            n_frames: self.frames,
            n_scenes: self.scenes,
            intra_scene_noise: self.noise,
            drift_scenes_fraction: self.drift,
            dim: self.dim,
            grid: self.grid,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct NeedleArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "200,400,800,1400,2000,3600"
    )]
    pub frame_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub depths: Vec<f64>,
    /// Cosine between each query row and the needle direction.
    #[arg(long, default_value_t = 1.0)]
    pub alignment: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replicates per cell.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 32)]
    pub query_len: usize,
    /// Retention matrix CSV, one row per (frame count, depth) cell.
    #[arg(long)]
    pub report: PathBuf,
    /// Aggregate and per-cell JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long, default_value_t = 200, value_parser = positive)]
    pub corpus_size: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Corpus::Calibrated)]
    pub corpus: Corpus,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-video CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also compare the three anchor strategies.
    #[arg(long)]
    pub anchor_ablation: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn open_unit(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

fn half_open_unit(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

/// `"12x12"` -> `(12, 12)`.
pub fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h
        .trim()
        .parse()
        .map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w
        .trim()
        .parse()
        .map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("grid {s:?} must be positive"));
    }
    Ok((h, w))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Format(_) | Error::DimMismatch(..) | Error::EmptyVideo => EXIT_MALFORMED,
        Error::BudgetInfeasible { .. } => EXIT_INFEASIBLE,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Compress(a) => cmd_compress(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Needle(a) => cmd_needle(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    format::write_atomic(path, &bytes)
}

pub fn cmd_compress(args: &CompressArgs) -> Result<()> {
    args.pipeline.config()?;
    let video = format::read_features(&args.input)?;
    let query = format::read_query(&args.query)?;
    let (_, _, d) = video.grid_shape();
    if query.dim() != d {
        return Err(Error::Format(format!(
            "query dim {} does not match feature dim {d}",
            query.dim()
        )));
    }
    let cfg = args.pipeline.config_for_dim(d)?;
    let (tokens, stats) = compress(&video, &query, &cfg)?;
    let bytes = format::encode_compressed(&tokens, &stats)?;
    if let Some(p) = &args.stats {
        format::write_atomic(p, &to_json(&stats)?)?;
    }
    format::write_atomic(&args.output, &bytes)?;
    eprintln!(
        "{} frames, {} tokens -> {} tokens (budget {} incl. {} query tokens)",
        stats.frames_in, stats.tokens_in, stats.tokens_final, cfg.l_max, stats.query_tokens
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = args.spec();
    spec.validate()?;
    let video = gen_video(&spec)?;
    format::write_atomic(&args.out, &format::encode_features(&video)?)
}

#[derive(Debug, Serialize)]
struct NeedleCsvRow {
    frame_count: usize,
    depth: f64,
    needle_full_res: f64,
    needle_tokens_kept_fraction: f64,
    any_token_survives: f64,
}

#[derive(Debug, Serialize)]
struct NeedleJson {
    aggregate: NeedleAggregate,
    cells: Vec<NeedleCellSummary>,
}

pub fn cmd_needle(args: &NeedleArgs) -> Result<()> {
    let defaults = NeedleSpec::default();
    let spec = NeedleSpec {
        haystack: SynthSpec {
            seed: args.seed,
            ..defaults.haystack
        },
        depths: args.depths.clone(),
        frame_counts: args.frame_counts.clone(),
        query_alignment: args.alignment,
        query_len: args.query_len,
        seeds: args.seeds,
    };
    spec.validate()?;
    let cfg = args.pipeline.config_for_dim(spec.haystack.dim)?;
    let outcomes = run_needle_grid(&spec, &cfg)?;
    let cells = summarize_cells(&outcomes);
    let rows: Vec<NeedleCsvRow> = cells
        .iter()
        .map(|c| NeedleCsvRow {
            frame_count: c.frame_count,
            depth: c.depth,
            needle_full_res: c.needle_full_res,
            needle_tokens_kept_fraction: c.needle_tokens_kept_fraction,
            any_token_survives: c.any_token_survives,
        })
        .collect();
    write_csv(&args.report, &rows)?;
    let summary = NeedleJson {
        aggregate: aggregate(&outcomes),
        cells,
    };
    let json = to_json(&summary)?;
    if let Some(p) = &args.json {
        format::write_atomic(p, &json)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&summary.aggregate)
            .map_err(|e| Error::Format(e.to_string()))?
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportJson {
    corpus: &'static str,
    corpus_size: usize,
    seed: u64,
    #[serde(flatten)]
    report: ReductionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_ablation: Option<Vec<AnchorAblationRow>>,
}

#[derive(Debug, Serialize)]
struct ReportCsvRow {
    video: usize,
    frames_in: usize,
    frames_kept: usize,
    frames_kept_rate: f64,
    stc_tokens_before: usize,
    stc_tokens_after: usize,
    tokens_reduced_rate: f64,
    tokens_final: usize,
    total_reduction_rate: f64,
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let (name, corpus) = match args.corpus {
        Corpus::Calibrated => ("calibrated", calibrated_corpus(args.corpus_size, args.seed)),
        Corpus::Static => ("static", static_corpus(args.corpus_size, args.seed)),
        Corpus::Orthogonal => ("orthogonal", orthogonal_corpus(args.corpus_size, args.seed)),
    };
    let dim = corpus.first().map_or(0, |s| s.dim);
    let cfg = args.pipeline.config_for_dim(dim)?;
    let report = reduction_report(&corpus, &cfg)?;
    let ablation = if args.anchor_ablation {
        let rows = anchor_ablation(&corpus, &cfg)?;
        print!("{}", render_ablation_table(&rows));
        Some(rows)
    } else {
        None
    };
    if let Some(p) = &args.csv {
        let rows: Vec<ReportCsvRow> = report
            .per_video
            .iter()
            .enumerate()
            .map(|(i, v)| ReportCsvRow {
                video: i,
                frames_in: v.frames_in,
                frames_kept: v.frames_kept,
                frames_kept_rate: v.frames_kept_rate,
                stc_tokens_before: v.stc_tokens_before,
                stc_tokens_after: v.stc_tokens_after,
                tokens_reduced_rate: v.tokens_reduced_rate,
                tokens_final: v.pipeline.tokens_final,
                total_reduction_rate: v.pipeline.total_reduction_rate,
            })
            .collect();
        write_csv(p, &rows)?;
    }
    println!(
        "mean frames kept {:.4}, mean STC token reduction {:.4} over {} videos",
        report.mean_frames_kept, report.mean_tokens_reduced, report.videos
    );
    let out = ReportJson {
        corpus: name,
        corpus_size: args.corpus_size,
        seed: args.seed,
        report,
        anchor_ablation: ablation,
    };
    format::write_atomic(&args.out, &to_json(&out)?)
}
