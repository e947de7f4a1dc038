//! `dctlr`: basis checks, projection sweeps, timing, memory tables and
//! training runs.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dct_lowrank::analysis::{
    bench_selection_vs_svd, contractivity_sweep, memory_model, round2, write_sweep_csv, MemoryMethod, RankRule,
};
use dct_lowrank::harness::{gen_task, train, RunMetrics, RunStatus};
use dct_lowrank::OrthoBasis;

use config::{parse_overrides, RunConfig};

/// Environment variable that overrides the output directory.
const OUT_DIR_ENV: &str = "DCTLR_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "dctlr-out";

#[derive(Parser)]
#[command(name = "dctlr", version, about = "DCT-based low-rank gradient projection tools")]
struct Cli {
    /// Output directory (overrides $DCTLR_OUT_DIR and any config value).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Orthogonality checks for the DCT-3 basis.
    Dct {
        #[command(subcommand)]
        action: DctAction,
    },
    /// Projection-quality sweeps and selection-vs-SVD timing.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Projection-matrix memory for SVD versus DCT storage.
    Memory(MemoryArgs),
    /// Train the two-layer model on a synthetic task.
    Train(TrainArgs),
}

#[derive(Subcommand)]
enum DctAction {
    /// Print max |Q^T Q - I| for each order; fails if any exceeds 1e-10 n.
    Check {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
    },
}

#[derive(Subcommand)]
enum BenchKind {
    /// Reconstruction-error ratios of every projector on random gradients.
    Projection {
        #[arg(long, value_delimiter = ',', default_value = "16,64")]
        dims: Vec<usize>,
        /// Ranks as integers or fractions of n, e.g. `1,n/4,n/2`.
        #[arg(long, value_delimiter = ',', default_value = "1,n/4,n/2", value_parser = parse_rank)]
        ranks: Vec<RankRule>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run cells on one thread.
        #[arg(long)]
        serial: bool,
    },
    /// Wall time of column selection versus a full SVD.
    Timing {
        #[arg(long, value_delimiter = ',', default_value = "512,1024")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_rank(s: &str) -> Result<RankRule, String> {
    s.parse().map_err(|e: dct_lowrank::Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    Bf16,
    Fp32,
}

#[derive(Args)]
struct MemoryArgs {
    #[arg(long)]
    layers: u64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    rank: u64,
    #[arg(long, value_enum, default_value = "bf16")]
    dtype: Dtype,
    #[arg(long, default_value_t = 4)]
    index_bytes: u64,
    /// Print a JSON report instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `--key value` overrides for any config key, e.g. `--seeds 1,2,3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

/// A bad invocation or config; maps to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(format!("{e:#}")).into()
}

/// Library argument errors are the caller's fault.
fn classify(e: dct_lowrank::Error) -> anyhow::Error {
    match e {
        dct_lowrank::Error::InvalidArgument(_) => usage(e),
        other => other.into(),
    }
}

fn out_dir(flag: Option<PathBuf>, config: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or(config)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?))
}

fn dct_check(ns: &[usize]) -> anyhow::Result<ExitCode> {
    if let Some(bad) = ns.iter().find(|&&n| n == 0) {
        return Err(usage(format!("basis order must be positive, got {bad}")));
    }
    let mut ok = true;
    println!("{:>8}  {:>12}  {:>12}  status", "n", "residual", "tolerance");
    for &n in ns {
        let residual = OrthoBasis::dct3(n).map_err(classify)?.orthogonality_residual();
        let tol = 1e-10 * n as f64;
        let pass = residual <= tol;
        ok &= pass;
        println!("{n:>8}  {residual:>12.3e}  {tol:>12.1e}  {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench_projection(
    dir: &Path,
    dims: &[usize],
    ranks: &[RankRule],
    trials: usize,
    seed: u64,
    serial: bool,
) -> anyhow::Result<ExitCode> {
    if trials == 0 {
        return Err(usage("trials must be at least 1"));
    }
    let rows = contractivity_sweep(dims, ranks, trials, seed, !serial).map_err(classify)?;
    let path = dir.join("projection.csv");
    write_sweep_csv(create(&path)?, &rows)?;

    let mut cells: BTreeMap<(usize, usize, String), (f64, usize)> = BTreeMap::new();
    for row in &rows {
        let name = if row.norm_mode == "none" { row.projector.clone() } else { format!("{}-{}", row.projector, row.norm_mode) };
        let cell = cells.entry((row.n, row.r, name)).or_default();
        cell.0 += row.ratio;
        cell.1 += 1;
    }
    println!("{:>6} {:>6} {:>10} {:>10} {:>10}", "n", "r", "projector", "mean", "1-r/n");
    for ((n, r, name), (sum, count)) in &cells {
        let bound = 1.0 - *r as f64 / *n as f64;
        println!("{n:>6} {r:>6} {name:>10} {:>10.4} {bound:>10.4}", sum / *count as f64);
    }
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn bench_timing(dir: &Path, ns: &[usize], trials: usize, seed: u64) -> anyhow::Result<ExitCode> {
    let mut reports = Vec::new();
    println!("{:>6} {:>6} {:>14} {:>14} {:>8}", "n", "r", "select ms", "svd ms", "ratio");
    for &n in ns {
        let rep = bench_selection_vs_svd(n, trials, seed).map_err(classify)?;
        println!(
            "{:>6} {:>6} {:>14.3} {:>14.3} {:>8.2}",
            rep.n,
            rep.rank,
            rep.dct_select.median_us / 1e3,
            rep.svd_full.median_us / 1e3,
            rep.median_ratio
        );
        reports.push(rep);
    }
    let path = dir.join("timing.json");
    serde_json::to_writer_pretty(create(&path)?, &reports)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn memory(args: &MemoryArgs) -> anyhow::Result<ExitCode> {
    if args.layers == 0 || args.n == 0 || args.rank == 0 {
        return Err(usage("layers, n and rank must be positive"));
    }
    if args.rank > args.n {
        eprintln!("warning: rank {} exceeds basis order {}", args.rank, args.n);
    }
    let (elem, dtype) = match args.dtype {
        Dtype::Bf16 => (2, "bf16"),
        Dtype::Fp32 => (4, "fp32"),
    };
    let reports: Vec<_> = [MemoryMethod::Svd, MemoryMethod::Dct]
        .into_iter()
        .map(|m| memory_model(m, args.layers, args.n, args.rank, elem, args.index_bytes))
        .collect();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("{:>6} {:>6} {:>6} {:>6} {:>6} {:>16} {:>12}", "method", "dtype", "L", "n", "r", "bytes", "MiB");
    for rep in &reports {
        let method = match rep.method {
            MemoryMethod::Svd => "svd",
            MemoryMethod::Dct => "dct",
        };
        println!(
            "{method:>6} {dtype:>6} {:>6} {:>6} {:>6} {:>16} {:>12.2}",
            rep.layers,
            rep.order,
            rep.rank,
            rep.total_bytes,
            round2(rep.mib)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run_seed(cfg: &RunConfig, seed: u64) -> dct_lowrank::Result<RunMetrics> {
    let spec = cfg.task_spec(seed);
    let data = gen_task(&spec)?;
    train(&spec, &data, &cfg.train_config(seed))
}

fn train_cmd(flag_dir: Option<PathBuf>, args: &TrainArgs) -> anyhow::Result<ExitCode> {
    let overrides = parse_overrides(&args.overrides).map_err(usage)?;
    if !args.config.is_file() {
        return Err(usage(format!("config file {} not found", args.config.display())));
    }
    let cfg = RunConfig::load(&args.config, &overrides).map_err(usage)?;
    let dir = out_dir(flag_dir, cfg.out_dir.clone());

    let results: Vec<(u64, dct_lowrank::Result<RunMetrics>)> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let cfg = &cfg;
                s.spawn(move || (seed, run_seed(cfg, seed)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });

    let mut summaries = Vec::new();
    let mut all_completed = true;
    for (seed, result) in results {
        let metrics = result.map_err(classify)?;
        let stem = format!("{}_seed{seed}", metrics.summary.optimizer);
        metrics.write_csv(create(&dir.join(format!("{stem}.csv")))?)?;
        serde_json::to_writer_pretty(create(&dir.join(format!("{stem}.json")))?, &metrics.summary)?;
        let s = &metrics.summary;
        println!(
            "seed {seed}: {:?} after {} steps, final loss {:.6}, mean recon ratio {:.4}, {:.2} s",
            s.status, s.steps_completed, s.final_loss, s.mean_recon_ratio, s.wall_time_s
        );
        if let Some(d) = &s.diagnostic {
            eprintln!("seed {seed}: {d}");
        }
        all_completed &= s.status == RunStatus::Completed;
        summaries.push(metrics.summary);
    }
    serde_json::to_writer_pretty(create(&dir.join("summary.json"))?, &summaries)?;
    println!("wrote {} run(s) to {}", summaries.len(), dir.display());
    Ok(if all_completed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Dct { action: DctAction::Check { n } } => dct_check(&n),
        Command::Bench { kind } => {
            let dir = out_dir(cli.out_dir, None);
            match kind {
                BenchKind::Projection { dims, ranks, trials, seed, serial } => {
                    bench_projection(&dir, &dims, &ranks, trials, seed, serial)
                }
                BenchKind::Timing { n, trials, seed } => bench_timing(&dir, &n, trials, seed),
            }
        }
        Command::Memory(args) => memory(&args),
        Command::Train(args) => train_cmd(cli.out_dir, &args),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on its own usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
