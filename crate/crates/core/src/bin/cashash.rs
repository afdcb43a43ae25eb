use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cashash::config::RunConfig;
use cashash::feature_io::convert_text_keys;
use cashash::pipeline::{
    cmd_bench_reduce, cmd_hash, cmd_match, cmd_oracle, cmd_plan, format_reduce_csv, Dataset,
    MatchMode,
};
use cashash::scheduler::Partition;

#[derive(Parser)]
#[command(name = "cashash", version, about = "Out-of-core cascade hashing feature matcher")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Also print the summary as CSV.
    #[arg(long, global = true)]
    csv: bool,
    #[command(flatten)]
    flags: ConfigFlags,
    #[command(subcommand)]
    command: Command,
}

/// One flag per config key; each overrides the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long, global = true, help = "short code bits")]
    m: Option<String>,
    #[arg(long, global = true, help = "long code bits")]
    n: Option<String>,
    #[arg(long, global = true)]
    tables: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true, help = "candidates kept after ranking")]
    k: Option<String>,
    #[arg(long, global = true, help = "Hamming threshold")]
    tau: Option<String>,
    #[arg(long, global = true)]
    ratio: Option<String>,
    #[arg(long, global = true)]
    min_candidates_for_ratio: Option<String>,
    #[arg(long, global = true)]
    switch_rounds: Option<String>,
    #[arg(long, global = true, help = "top-scale fraction for seed matching")]
    fraction: Option<String>,
    #[arg(long, global = true)]
    ransac_iterations: Option<String>,
    #[arg(long, global = true)]
    ransac_threshold: Option<String>,
    #[arg(long, global = true)]
    ransac_confidence: Option<String>,
    #[arg(long, global = true, help = "epipolar band half-width in px, or inf")]
    band: Option<String>,
    #[arg(long, global = true, help = "images per block, or auto")]
    block_images: Option<String>,
    #[arg(long, global = true)]
    blocks_per_group: Option<String>,
    #[arg(long, global = true)]
    workers: Option<String>,
    #[arg(long, global = true)]
    memory_budget_mb: Option<String>,
    #[arg(long, global = true)]
    output_dir: Option<String>,
    #[arg(long, global = true)]
    cache_dir: Option<String>,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let pairs = [
            ("m", &self.m),
            ("n", &self.n),
            ("tables", &self.tables),
            ("seed", &self.seed),
            ("k", &self.k),
            ("tau", &self.tau),
            ("ratio", &self.ratio),
            ("min_candidates_for_ratio", &self.min_candidates_for_ratio),
            ("switch_rounds", &self.switch_rounds),
            ("fraction", &self.fraction),
            ("ransac_iterations", &self.ransac_iterations),
            ("ransac_threshold", &self.ransac_threshold),
            ("ransac_confidence", &self.ransac_confidence),
            ("band", &self.band),
            ("block_images", &self.block_images),
            ("blocks_per_group", &self.blocks_per_group),
            ("workers", &self.workers),
            ("memory_budget_mb", &self.memory_budget_mb),
            ("output_dir", &self.output_dir),
            ("cache_dir", &self.cache_dir),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-image code caches.
    Hash { manifest: Option<PathBuf> },
    /// Match every pair, or run seed matching plus guided matching.
    Match {
        manifest: Option<PathBuf>,
        #[arg(long)]
        guided: bool,
    },
    /// Compare cascade output with brute force on every pair.
    Oracle { manifest: Option<PathBuf> },
    /// Time the dot-product reduction at every switch point.
    BenchReduce {
        #[arg(long, default_value_t = 200_000)]
        ops: usize,
    },
    /// Print the pair plan and residency statistics.
    Plan {
        manifest: Option<PathBuf>,
        /// Plan for this many images instead of a manifest.
        #[arg(long, conflicts_with = "manifest")]
        images: Option<usize>,
    },
    /// Convert a text keypoint file to the binary feature format.
    ConvertKeys { input: PathBuf, output: PathBuf },
}

fn config(cli: &Cli, manifest: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.flags.apply(&mut cfg)?;
    if let Some(m) = manifest {
        cfg.manifest = Some(m.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.manifest.is_none() {
        bail!("no manifest given (positional argument or `manifest` config key)");
    }
    Ok(Dataset::open(cfg)?)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Hash { manifest } => {
            let cfg = config(cli, manifest.as_ref())?;
            let out = cmd_hash(&dataset(&cfg)?, &cfg)?;
            println!(
                "hashed {} images, {} cached, {} failed in {:.3} s",
                out.computed,
                out.cached,
                out.failures.len(),
                out.elapsed.as_secs_f64()
            );
            for (id, e) in &out.failures {
                eprintln!("failed: {id}: {e}");
            }
            Ok(out.failures.is_empty())
        }
        Command::Match { manifest, guided } => {
            let cfg = config(cli, manifest.as_ref())?;
            let mode = if *guided {
                MatchMode::Guided
            } else {
                MatchMode::Exhaustive
            };
            let summary = cmd_match(&dataset(&cfg)?, &cfg, mode)?;
            print!("{}", summary.to_text());
            if cli.csv {
                print!("{}", summary.to_csv());
            }
            Ok(summary.failures.is_empty())
        }
        Command::Oracle { manifest } => {
            let cfg = config(cli, manifest.as_ref())?;
            let ds = dataset(&cfg)?;
            let report = cmd_oracle(&ds, &cfg)?;
            let t = &report.total;
            println!(
                "pairs {}  cascade {}  oracle {}  common {}  recall {:.4}  precision {:.4}",
                report.pairs.len(),
                t.cascade,
                t.oracle,
                t.common,
                t.recall(),
                t.precision()
            );
            if cli.csv {
                println!("pairs,cascade,oracle,common,recall,precision");
                println!(
                    "{},{},{},{},{:.6},{:.6}",
                    report.pairs.len(),
                    t.cascade,
                    t.oracle,
                    t.common,
                    t.recall(),
                    t.precision()
                );
            }
            for f in &report.failures {
                eprintln!("failed: {f}");
            }
            Ok(report.failures.is_empty())
        }
        Command::BenchReduce { ops } => {
            let cfg = config(cli, None)?;
            print!("{}", format_reduce_csv(&cmd_bench_reduce(*ops, cfg.seed)?));
            Ok(true)
        }
        Command::Plan { manifest, images } => {
            let cfg = config(cli, manifest.as_ref())?;
            let partition = match images {
                Some(k) => Partition::new(*k, cfg.block_images.unwrap_or(1), cfg.blocks_per_group)?,
                None => dataset(&cfg)?.partition,
            };
            print!("{}", cmd_plan(&partition, cfg.workers)?);
            Ok(true)
        }
        Command::ConvertKeys { input, output } => {
            let n = convert_text_keys(input, output)
                .with_context(|| format!("converting {}", input.display()))?;
            println!("wrote {n} keypoints to {}", output.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
