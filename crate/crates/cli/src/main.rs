use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use gfef_cli::commands;
use gfef_cli::service;
use gfef_core::checkpoint;

#[derive(Parser)]
#[command(name = "gfef", version, about = "Hypergraph feature-fusion time-series classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.top_k=8`.  Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (`.seed{n}` is appended with several seeds).
        #[arg(long, default_value = "gfef.ckpt")]
        out: PathBuf,
        /// Per-epoch TSV log (default: `<out>.log.tsv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print accuracy, macro F1/precision and the confusion matrix.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// UCR/CSV file; defaults to the held-out split in the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify series from a file, one per line.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic strain dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the held-out split (`dataset.synthetic.test_seed`).
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Serve /health, /classify and /classify_batch.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `service.port`.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Compare analytic and finite-difference gradients in f64.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parameter-name prefix, or `all`.
        #[arg(long, default_value = "all")]
        select: String,
        #[arg(long, default_value_t = 64)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dump the stage-1 hyperedge composition table.
    Hyperedges {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { cfg, out: ckpt, log } => {
            let config = commands::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let log_path = log.unwrap_or_else(|| {
                let mut s = ckpt.as_os_str().to_owned();
                s.push(".log.tsv");
                PathBuf::from(s)
            });
            let f = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            let mut log = BufWriter::new(f);
            commands::run_train(&config, &ckpt, &mut log, &mut out)?;
            log.flush()?;
        }
        Command::Evaluate { checkpoint: path, data } => {
            let model = checkpoint::load(&path)?;
            write!(out, "{}", commands::run_evaluate(&model, data.as_deref())?)?;
        }
        Command::Predict { checkpoint: path, input } => {
            let model = checkpoint::load(&path)?;
            let series = commands::read_series_file(&input)?;
            for line in commands::run_predict(&model, &series)? {
                writeln!(out, "{line}")?;
            }
        }
        Command::Generate { cfg, out: path, test_out } => {
            let config = commands::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            commands::run_generate(&config, &path, test_out.as_deref())?;
        }
        Command::Serve { cfg, checkpoint: path, port } => {
            let config = commands::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let model = Arc::new(checkpoint::load(&path)?);
            let port = port.unwrap_or(config.service.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(model, port, config.service.max_body))?;
        }
        Command::Gradcheck { cfg, select, trials, tol, seed } => {
            let config = commands::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let report = commands::run_gradcheck(&config, &select, trials, tol, seed)?;
            write!(out, "{}", report.to_text())?;
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Hyperedges { checkpoint: path, data } => {
            let model = checkpoint::load(&path)?;
            let ds = commands::evaluation_set(&model, data.as_deref())?;
            write!(out, "{}", commands::run_hyperedges(&model, &ds)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
