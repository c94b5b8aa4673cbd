use clap::{Parser, Subcommand};
use pdediscover_cli::{cmd_discover, cmd_generate, cmd_report, exit, init_threads, CliError, ExperimentConfig, GenerateArgs};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pdediscover", version, about = "Discover governing PDEs from sparse field measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic truth field and sparse noisy measurements.
    Generate(GenerateArgs),
    /// Run discovery from an experiment config.
    Discover {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate(args) => {
            for p in cmd_generate(&args)? {
                println!("wrote {}", p.display());
            }
            Ok(exit::OK)
        }
        Command::Discover { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| CliError::Config("output_dir: not set and no --out given".into()))?;
            let result = cmd_discover(&cfg, &dir)?;
            print!("{}", cmd_report(&dir)?);
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            Ok(if result.is_empty_model() { exit::EMPTY_MODEL } else { exit::OK })
        }
        Command::Report { out } => {
            print!("{}", cmd_report(&out)?);
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
