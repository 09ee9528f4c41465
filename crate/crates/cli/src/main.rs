use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracer_core::config::{RunConfig, TEMPLATE};
use tracer_core::pipeline::Pipeline;
use tracer_core::Error;

const DEFAULT_OUT: &str = "tracer-out";

#[derive(Parser)]
#[command(name = "tracer", version, about = "Causal tracing of small neural classifiers")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; falls back to TRACER_OUT, then the config, then ./tracer-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core and 1 runs sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented configuration template with every default.
    Init {
        #[arg(default_value = "tracer.toml")]
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    Train,
    Explain,
    Graph,
    CfTrain,
    CfGenerate,
    Reliability,
    Aggregate,
    Compress,
    Benchmark,
    /// Every stage in order.
    Run,
}

impl Command {
    fn stage(&self) -> Option<&'static str> {
        Some(match self {
            Command::Train => "train",
            Command::Explain => "explain",
            Command::Graph => "graph",
            Command::CfTrain => "cf-train",
            Command::CfGenerate => "cf-generate",
            Command::Reliability => "reliability",
            Command::Aggregate => "aggregate",
            Command::Compress => "compress",
            Command::Benchmark => "benchmark",
            Command::Init { .. } | Command::Run => return None,
        })
    }
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(
                Error::Config { .. }
                    | Error::MissingArtifact(_)
                    | Error::InvalidArgument(_)
                    | Error::Version { .. }
                    | Error::Checksum { .. }
            )
        )
    })
}

fn init(path: &PathBuf, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        anyhow::bail!("{} exists; pass --force to overwrite", path.display());
    }
    std::fs::write(path, TEMPLATE).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Init { path, force } = &cli.command {
        return init(path, *force);
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("TRACER_OUT").map(PathBuf::from))
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let pipeline = Pipeline::new(config, out)?;
    log::info!("config digest {}", pipeline.digest());
    match cli.command.stage() {
        Some(stage) => pipeline.run(stage)?,
        None => pipeline.run_all()?,
    }
    println!("{}", pipeline.out_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("TRACER_LOG")
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_validation(&err) { 2 } else { 1 })
        }
    }
}
