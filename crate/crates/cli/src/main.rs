use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sectune_cli::config::Mode;
use sectune_cli::{commands, CliError, CliResult, RunConfig};
use sectune_core::eval::PromptVariant;

#[derive(Parser)]
#[command(
    name = "sectune",
    version,
    about = "Security-aware instruction tuning experiments"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a commit corpus into a security dataset.
    Mine,
    /// Train a checkpoint.
    Train {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Evaluate a checkpoint on scenarios and utility probes.
    Eval {
        /// Comma-separated prompt variants.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<PromptVariant>,
    },
    /// Train and score SVEN models over a range of KL weights.
    SweepSven {
        /// Comma-separated exponents n of the weights 2^n/10.
        #[arg(long, value_delimiter = ',')]
        exponents: Vec<u32>,
    },
    /// Merge reports into one table.
    Report,
    /// Write the synthetic corpora.
    Synth,
    /// Run the end-to-end micro-study.
    Study,
}

fn run(cli: Cli) -> CliResult<()> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::Mine => print!("{}", commands::cmd_mine(&cfg)?.summary()),
        Command::Train { mode } => {
            if let (Some(m), Some(t)) = (mode, cfg.train.as_mut()) {
                t.mode = m;
            }
            let out = commands::cmd_train(&cfg)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::Eval { variants } => {
            if let (false, Some(e)) = (variants.is_empty(), cfg.eval.as_mut()) {
                e.variants = variants;
            }
            let out = commands::cmd_eval(&cfg)?;
            print!("{}", out.report.render());
            println!("report {}", out.path.display());
        }
        Command::SweepSven { exponents } => {
            if let (false, Some(s)) = (exponents.is_empty(), cfg.sweep.as_mut()) {
                s.exponents = exponents;
            }
            let out = commands::cmd_sweep_sven(&cfg)?;
            print!("{}", out.report.render());
            println!("report {}", out.path.display());
        }
        Command::Report => {
            let out = commands::cmd_report(&cfg)?;
            print!("{}", out.report.render());
            println!("report {}", out.path.display());
        }
        Command::Synth => {
            let out = commands::cmd_synth(&cfg)?;
            println!("commits {}", out.commits.display());
            println!("scenarios {}", out.scenarios.display());
        }
        Command::Study => {
            let out = commands::cmd_study(&cfg)?;
            print!("{}", out.report.report.render());
            println!("report {}", out.report.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
