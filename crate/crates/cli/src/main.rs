use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lcoa::bench::{self, BenchConfig, BenchMode, Image};
use lcoa::network::{self, ModelWeights, NetConfig, SrMode};
use lcoa::tensor::Exec;
use lcoa::{lsp, selftest};

#[derive(Parser)]
#[command(
    name = "lcoa",
    version,
    about = "Sparse collaborative attention for super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in invariant checks.
    Selftest,
    /// Time dense, per-layer sparse and shared sparse attention stacks.
    Bench(BenchArgs),
    /// Upscale a PPM image with a weight file.
    Sr(SrArgs),
    /// Write a weight file with seeded synthetic parameters.
    Synth(SynthArgs),
    /// Luma PSNR between two PPM images.
    Psnr { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct BenchArgs {
    /// One or more of nla, lsp, lcoa (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "nla,lsp,lcoa")]
    mode: Vec<BenchMode>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Use this image instead of a random one; overrides --height/--width.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = lsp::DEFAULT_CLUSTERS)]
    clusters: usize,
    #[arg(long, default_value_t = lsp::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spread work over all cores; outputs are identical either way.
    #[arg(long)]
    parallel: bool,
    /// Score sparse modes against a dense run even when nla is not selected.
    #[arg(long)]
    psnr: bool,
    /// Tensor memory budget in MiB; runs that exceed it are reported as failed rows.
    #[arg(long)]
    mem_limit_mb: Option<usize>,
    /// CSV destination; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    scale: u8,
    #[arg(long)]
    out: PathBuf,
    /// Also update the centroids from this image and save them.
    #[arg(long)]
    calibrate: bool,
    /// Where calibrated weights go; defaults to `<weights>.calibrated.lcoa`.
    #[arg(long, requires = "calibrate")]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    scale: u8,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    fau: usize,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = lsp::DEFAULT_CLUSTERS)]
    clusters: usize,
    #[arg(long, default_value_t = lsp::DEFAULT_WINDOW)]
    window: usize,
    /// Attention gain in every FAU; 0 disables the attention path.
    #[arg(long, default_value_t = 1.0)]
    beta: f32,
    /// Seed the centroids from this image's shallow-feature queries.
    #[arg(long)]
    centroids_from: Option<PathBuf>,
}

fn exec(parallel: bool) -> Exec {
    if parallel {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn run_selftest() -> Result<bool> {
    let checks = selftest::run_all();
    let mut ok = true;
    for c in &checks {
        match &c.outcome {
            Ok(()) => println!("PASS  {}", c.name),
            Err(msg) => {
                ok = false;
                println!("FAIL  {}: {msg}", c.name);
            }
        }
    }
    let passed = checks.iter().filter(|c| c.outcome.is_ok()).count();
    println!("{passed}/{} checks passed", checks.len());
    Ok(ok)
}

fn run_bench(args: BenchArgs) -> Result<bool> {
    let input = match &args.input {
        Some(p) => Some(bench::read_ppm(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg = BenchConfig {
        height: args.height,
        width: args.width,
        input,
        channels: args.channels,
        layers: args.layers,
        clusters: args.clusters,
        window_size: args.window,
        warmup: args.warmup,
        repeats: args.repeats,
        seed: args.seed,
        exec: exec(args.parallel),
        psnr: args.psnr,
        mem_limit: args.mem_limit_mb.map(|mb| mb << 20),
        ..BenchConfig::default()
    };
    let records = bench::run_benchmark(&cfg, &args.mode)?;
    for r in &records {
        match (&r.failure, r.wall_time_s) {
            (Some(why), _) => eprintln!("{:>4}  n={}  failed: {why}", r.mode, r.n),
            (None, Some(t)) => eprintln!(
                "{:>4}  n={}  {t:.3} s  peak {:.1} MiB  plans/forward {}{}",
                r.mode,
                r.n,
                r.peak_alloc_bytes.unwrap_or(0) as f64 / (1 << 20) as f64,
                r.plan_builds,
                r.psnr_db
                    .map(|p| format!("  psnr vs nla {p:.2} dB"))
                    .unwrap_or_default(),
            ),
            (None, None) => {}
        }
    }
    match &args.out {
        Some(path) => bench::write_csv(&records, path)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", bench::to_csv(&records)),
    }
    Ok(true)
}

fn calibrated_path(weights: &Path) -> PathBuf {
    let stem = weights
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("weights");
    weights.with_file_name(format!("{stem}.calibrated.lcoa"))
}

fn run_sr(args: SrArgs) -> Result<bool> {
    let img = bench::read_ppm(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut weights = network::load_weights(&args.weights)
        .with_context(|| format!("loading {}", args.weights.display()))?;
    let cfg = NetConfig::from_weights(&weights, args.scale as usize);
    let mode = if args.calibrate {
        SrMode::Calibrate
    } else {
        SrMode::Inference
    };
    let out = network::lcoan_forward_with(
        &img.to_feature_map(),
        &weights,
        &cfg,
        mode,
        exec(args.parallel),
    )
    .with_context(|| format!("weights {} at scale {}", args.weights.display(), args.scale))?;
    let sr = Image::from_feature_map(&out.image)?;
    bench::write_ppm(&sr, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "{}x{} -> {}x{} written to {}",
        img.width(),
        img.height(),
        sr.width(),
        sr.height(),
        args.out.display()
    );
    if let Some(state) = out.calibrated {
        weights.kmeans = state;
        let path = args
            .weights_out
            .unwrap_or_else(|| calibrated_path(&args.weights));
        network::save_weights(&weights, &path)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("calibrated weights written to {}", path.display());
    }
    Ok(true)
}

fn run_synth(args: SynthArgs) -> Result<bool> {
    let cfg = NetConfig {
        num_fau: args.fau,
        channels: args.channels,
        embed: args.channels,
        scale: args.scale as usize,
        clusters: args.clusters,
        window_size: args.window,
        ..NetConfig::default()
    };
    let mut weights = ModelWeights::synthesize(&cfg, args.seed)?;
    weights.set_beta(args.beta);
    if let Some(p) = &args.centroids_from {
        let img = bench::read_ppm(p).with_context(|| format!("reading {}", p.display()))?;
        weights.seed_centroids(&img.to_feature_map(), args.seed)?;
    }
    network::save_weights(&weights, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "{} parameters ({} with dense attention blocks) written to {}",
        weights.param_count(),
        weights.nla_variant_param_count(),
        args.out.display()
    );
    Ok(true)
}

fn run_psnr(a: &Path, b: &Path) -> Result<bool> {
    let ia = bench::read_ppm(a).with_context(|| format!("reading {}", a.display()))?;
    let ib = bench::read_ppm(b).with_context(|| format!("reading {}", b.display()))?;
    if (ia.height(), ia.width()) != (ib.height(), ib.width()) {
        bail!(
            "size mismatch: {}x{} vs {}x{}",
            ia.width(),
            ia.height(),
            ib.width(),
            ib.height()
        );
    }
    println!("{:.4}", bench::psnr_y(&ia, &ib)?);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Selftest => run_selftest(),
        Command::Bench(args) => run_bench(args),
        Command::Sr(args) => run_sr(args),
        Command::Synth(args) => run_synth(args),
        Command::Psnr { a, b } => run_psnr(&a, &b),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
