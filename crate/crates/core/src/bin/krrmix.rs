use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use krrmix::harness::bench::{bench, BenchConfig, BenchVariant, BENCH_HEADER};
use krrmix::harness::{compare, load_config, train_to_dir, write_csv, RunMetrics};
use krrmix::mixers::Variant;
use krrmix::verify;

#[derive(Parser)]
#[command(name = "krrmix", version, about = "Train, compare, check and benchmark regression-based token mixers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes metrics.csv and checkpoint.bin.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train several mixer variants on identical data.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: nw, krr, krr-share, krr-nolrr, llr.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<Variant>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the invariant, oracle and gradient suites in 64-bit.
    Check {
        /// Run one suite, or every suite whose name starts with this prefix.
        #[arg(long)]
        suite: Option<String>,
        /// Print suite names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Time one mixer layer's forward pass.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 32)]
        head_dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> Result<usize> {
    let n = match std::env::var("KRRMIX_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("KRRMIX_THREADS must be a positive integer, got `{s}`"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("starting worker pool")?;
    Ok(n)
}

fn print_row(m: &RunMetrics) {
    println!(
        "{:>6} {:<10} train {:.4}  eval {:.4}  acc {:.4}  {} ms",
        m.step,
        m.variant.label(),
        m.train_loss,
        m.eval_loss,
        m.token_accuracy,
        m.wall_ms
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.cmd {
        Cmd::Train { config, out } => {
            let cfg = load_config(&config).with_context(|| format!("reading {}", config.display()))?;
            train_to_dir(&cfg, &out, print_row)?;
            println!("wrote {}", out.join("metrics.csv").display());
        }
        Cmd::Compare { config, variants, out } => {
            let cfg = load_config(&config).with_context(|| format!("reading {}", config.display()))?;
            let result = compare(&cfg, &variants, print_row)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("compare.csv");
            write_csv(std::fs::File::create(&path)?, &result.rows())?;
            let summary = result.summary();
            std::fs::write(out.join("summary.txt"), &summary)?;
            println!("\n{summary}wrote {}", path.display());
        }
        Cmd::Check { suite, list } => {
            if list {
                for name in verify::SUITE_NAMES {
                    println!("{name}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let filter = suite.as_deref().unwrap_or("");
            let outcomes = verify::run_suites(filter, |o| println!("{o}"));
            if outcomes.is_empty() {
                bail!("no suite matches `{filter}`");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} suites, {} passed, {} failed", outcomes.len(), outcomes.len() - failed, failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Bench {
            lengths,
            reps,
            head_dim,
            heads,
            out,
        } => {
            if head_dim % 2 != 0 {
                bail!("--head-dim must be even");
            }
            let cfg = BenchConfig {
                lengths,
                head_dim,
                heads,
                reps,
                ..BenchConfig::default()
            };
            let stdout = std::io::stdout();
            let mut lines = vec![BENCH_HEADER.to_string()];
            writeln!(stdout.lock(), "{BENCH_HEADER}")?;
            bench(&cfg, &BenchVariant::ALL, |row| {
                let line = row.csv_line();
                println!("{line}");
                lines.push(line);
            })?;
            if let Some(path) = out {
                std::fs::write(&path, lines.join("\n") + "\n")?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
