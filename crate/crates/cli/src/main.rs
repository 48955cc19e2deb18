mod output;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dqrelo_core::archive::{load_archive, save_archive, TensorArchive, TensorRecord};
use dqrelo_core::compress::{self, compress_archives, EntryKind};
use dqrelo_core::container::{read_container, write_container, ContainerMeta};
use dqrelo_core::reconstruct::{error_report, reconstruct, reconstruct_from_entries, ReconstructionReport};
use dqrelo_core::stats::{self, Alignment};
use dqrelo_core::{selftest, Error, Result};

use output::{opt, Format, Report};

#[derive(Debug, Parser)]
#[command(
    name = "dqrelo",
    version,
    about = "Data-free delta compression for fine-tuned checkpoints"
)]
struct Cli {
    /// Output style for reports written to stdout.
    #[arg(long, global = true, value_enum, default_value = "kv")]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress the delta between two checkpoints into a .dqr container.
    Compress(Box<CompressArgs>),
    /// Rebuild a fine-tuned checkpoint from a base and a .dqr container.
    Decompress(DecompressArgs),
    /// Summary statistics of the delta between two checkpoints.
    Stats(StatsArgs),
    /// Per-tensor reconstruction error between two checkpoints.
    Diff(DiffArgs),
    /// Performance retention from three benchmark scores.
    Retention(RetentionArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with compression settings; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dqrelo, svd_only, onebit_only, magnitude_prune or random_prune.
    #[arg(long)]
    method: Option<String>,
    /// Low-rank share of the budget, as "p/q" or a decimal.
    #[arg(long)]
    rho1: Option<String>,
    /// Bits per full-precision weight.
    #[arg(long)]
    bits: Option<u32>,
    /// Kept fraction for 1-D tensors.
    #[arg(long)]
    vector_rho: Option<String>,
    /// Depth window "LO:HI" (fractions of the layer count, half-open).
    #[arg(long)]
    layer_range: Option<String>,
    #[arg(long)]
    include: Vec<String>,
    #[arg(long)]
    exclude: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// f16 or f32.
    #[arg(long)]
    factor_precision: Option<String>,
    /// Write a per-tensor reconstruction error report to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecompressArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip the base fingerprint check.
    #[arg(long)]
    force: bool,
    /// Compare the output against --finetuned and print the error.
    #[arg(long, requires = "finetuned")]
    verify: bool,
    #[arg(long)]
    finetuned: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long, default_value_t = stats::DEFAULT_ENTROPY_BINS)]
    bins: usize,
}

#[derive(Debug, Args)]
struct DiffArgs {
    /// Candidate checkpoint.
    #[arg(long)]
    a: PathBuf,
    /// Reference checkpoint.
    #[arg(long)]
    b: PathBuf,
    /// Measure errors relative to the delta `b - base` instead of `b`.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RetentionArgs {
    #[arg(long, allow_negative_numbers = true)]
    base_score: f64,
    #[arg(long, allow_negative_numbers = true)]
    sft_score: f64,
    #[arg(long, allow_negative_numbers = true)]
    compressed_score: f64,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DQRELO_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DQRELO_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn error_fields(report: &mut Report, rep: &ReconstructionReport) {
    report.field("global_relative_error", rep.global_relative_error);
    report.field("measured_sq_error", rep.total_sq_error());
    report.field("tensors", rep.per_tensor.len());
    report.field("skipped", rep.skipped.len());
    for (name, t) in &rep.per_tensor {
        report.field(format!("tensor.{name}.kind"), opt(t.kind.map(EntryKind::as_str)));
        report.field(format!("tensor.{name}.frobenius_error"), t.frobenius_error);
        report.field(format!("tensor.{name}.delta_norm"), t.delta_norm);
        report.field(format!("tensor.{name}.relative_error"), t.relative_error);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_compress(args: CompressArgs, format: Format) -> Result<Report> {
    let file = match &args.config {
        Some(p) => settings::FileConfig::load(p)?,
        None => settings::FileConfig::default(),
    };
    let cfg = settings::resolve(
        file,
        settings::Overrides {
            method: args.method,
            rho1: args.rho1,
            bits: args.bits,
            vector_rho: args.vector_rho,
            layer_range: args.layer_range,
            include: args.include,
            exclude: args.exclude,
            seed: args.seed,
            factor_precision: args.factor_precision,
        },
    )?;
    let base = load_archive(&args.base)?;
    let ft = load_archive(&args.finetuned)?;
    let out = compress_archives(&base, &ft, &cfg)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    write_container(
        &args.out,
        &ContainerMeta::new(cfg.clone(), base.fingerprint()),
        &out.entries,
    )?;
    let file_bytes = std::fs::metadata(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let params = out.model_params();
    let storage = compress::storage_accounting(&out.entries, params, cfg.bits, 1);
    let mut report = Report::new();
    report
        .field("method", cfg.method)
        .field("rho1", cfg.rho1)
        .field("bits", cfg.bits)
        .field("configured_rho", cfg.total_rho()?)
        .field("achieved_rho", storage.achieved_rho)
        .field("model_params", params)
        .field("stored_bits", out.entries.iter().map(|e| e.stored_bits).sum::<u64>())
        .field("file_bytes", file_bytes.len())
        .field("entries", out.entries.len());
    for kind in EntryKind::ALL {
        report.field(format!("count.{}", kind.as_str()), out.count(kind));
    }
    report
        .field("unmatched", out.unmatched.len())
        .field("base_only", out.base_only.len())
        .field("warnings", out.warnings.len());

    if let Some(path) = &args.report {
        let rebuilt = reconstruct_from_entries(&base, &out.entries)?;
        let mut rep = error_report(&base, &ft, &rebuilt)?;
        for e in &out.entries {
            if let Some(t) = rep.per_tensor.get_mut(&e.name) {
                t.kind = Some(e.kind());
            }
        }
        let mut body = Report::new();
        let predicted: f64 = out.entries.iter().filter_map(|e| e.predicted_sq_error).sum();
        body.field("predicted_sq_error", predicted);
        error_fields(&mut body, &rep);
        let text = body.render(format);
        write_text(path, &text)?;
        report.field("report", path.display());
    }
    Ok(report)
}

fn cmd_decompress(args: DecompressArgs) -> Result<Report> {
    let base = load_archive(&args.base)?;
    let container = read_container(&args.delta)?;
    let rebuilt = reconstruct(&base, &container, args.force)?;
    save_archive(&rebuilt, &args.out)?;
    let mut report = Report::new();
    report.field("tensors_written", rebuilt.len());
    report.field("out", args.out.display());
    if args.verify {
        let ft_path = args.finetuned.expect("clap enforces --finetuned with --verify");
        let ft = load_archive(&ft_path)?;
        let rep = error_report(&base, &ft, &rebuilt)?.with_kinds(&container);
        let predicted: f64 = container
            .manifest
            .entries
            .iter()
            .filter_map(|e| e.predicted_sq_error)
            .sum();
        report.field("predicted_sq_error", predicted);
        error_fields(&mut report, &rep);
    }
    Ok(report)
}

fn cmd_stats(args: StatsArgs) -> Result<Report> {
    if args.bins == 0 {
        return Err(Error::Config("--bins must be positive".into()));
    }
    let base = load_archive(&args.base)?;
    let ft = load_archive(&args.finetuned)?;
    let ex = stats::extract_deltas(&base, &ft, Alignment::Relaxed)?;
    for name in &ex.mismatched {
        log::warn!("skipping `{name}`: not present in both checkpoints with the same shape");
    }
    let s = stats::compute_stats(&ex.deltas, args.bins)?;
    let mut report = Report::new();
    report
        .field("mean_abs", s.mean_abs)
        .field("mean_singular_value", opt(s.mean_singular_value))
        .field("entropy_bits", s.entropy_bits)
        .field("num_bins", s.num_bins)
        .field("tensors", s.per_tensor.len())
        .field("mismatched", ex.mismatched.len());
    for (name, t) in &s.per_tensor {
        report.field(format!("tensor.{name}.numel"), t.numel);
        report.field(format!("tensor.{name}.mean_abs"), t.mean_abs);
        report.field(format!("tensor.{name}.mean_singular_value"), opt(t.mean_singular_value));
        report.field(format!("tensor.{name}.entropy_bits"), t.entropy_bits);
    }
    Ok(report)
}

/// An all-zero archive with the shapes of `like`, so errors become absolute.
fn zeros_like(like: &TensorArchive) -> Result<TensorArchive> {
    let mut z = TensorArchive::new();
    for (name, rec) in like.iter() {
        z.insert(
            name,
            TensorRecord::from_f32(rec.shape().to_vec(), rec.dtype(), &vec![0.0; rec.numel()])?,
        );
    }
    Ok(z)
}

fn cmd_diff(args: DiffArgs) -> Result<Report> {
    let a = load_archive(&args.a)?;
    let b = load_archive(&args.b)?;
    let base = match &args.base {
        Some(p) => load_archive(p)?,
        None => zeros_like(&b)?,
    };
    let rep = error_report(&base, &b, &a)?;
    let mut report = Report::new();
    error_fields(&mut report, &rep);
    Ok(report)
}

fn cmd_retention(args: RetentionArgs) -> Result<Report> {
    let r = stats::performance_retention(args.base_score, args.sft_score, args.compressed_score)?;
    let mut report = Report::new();
    report
        .field("retention", r.retention)
        .field("drop", r.drop)
        .field("drop_percent", format!("{:.2}", r.drop * 100.0));
    Ok(report)
}

fn cmd_selftest() -> Result<(Report, bool)> {
    let checks = selftest::run()?;
    let mut report = Report::new();
    let mut all = true;
    for c in &checks {
        all &= c.passed;
        report.field(format!("check.{}", c.name), if c.passed { "pass" } else { "fail" });
        report.field(format!("check.{}.detail", c.name), &c.detail);
    }
    report.field("passed", checks.iter().filter(|c| c.passed).count());
    report.field("failed", checks.iter().filter(|c| !c.passed).count());
    Ok((report, all))
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let format = cli.format;
    let (report, ok) = match cli.command {
        Command::Compress(a) => (cmd_compress(*a, format)?, true),
        Command::Decompress(a) => (cmd_decompress(a)?, true),
        Command::Stats(a) => (cmd_stats(a)?, true),
        Command::Diff(a) => (cmd_diff(a)?, true),
        Command::Retention(a) => (cmd_retention(a)?, true),
        Command::Selftest => cmd_selftest()?,
    };
    print!("{}", report.render(format));
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
