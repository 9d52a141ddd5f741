//! `persalign` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "persalign", version, about = "Personalized preference-alignment simulator")]
struct Cli {
    /// Worker threads for seed sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config (see `persalign preset`).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an instance and its diversity and gap reports.
    GenInstance {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the greedy online loop, one run per seed.
    Online {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use this instance file instead of generating one.
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Run seeds (comma separated); defaults to the config's run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit nested prefixes of reference-logged data and record the regret decay.
    OfflineSweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report head diversity and gap statistics.
    Diagnose {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized property suites.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a run from its manifest and compare outputs byte for byte.
    Replay {
        /// Run directory or manifest file.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in configs, or print one.
    Preset { name: Option<String> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenInstance { config, out } => commands::gen_instance(&config, &out),
        Command::Online {
            config,
            instance,
            seeds,
            out,
        } => commands::online(&config, instance.as_deref(), seeds, &out),
        Command::OfflineSweep { config, instance, out } => {
            commands::offline_sweep(&config, instance.as_deref(), &out)
        }
        Command::Diagnose { config, instance, out } => {
            commands::diagnose(&config, instance.as_deref(), out.as_deref())
        }
        Command::Verify { seed, out } => commands::verify(seed, out.as_deref()),
        Command::Replay { manifest, out } => commands::replay(&manifest, &out),
        Command::Preset { name } => commands::preset(name.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}
