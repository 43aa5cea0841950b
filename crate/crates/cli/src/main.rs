use std::path::PathBuf;

use clap::{Parser, Subcommand};
use imbal::commands::{self, RunArgs};
use imbal::{output_root, CliResult};

#[derive(Parser)]
#[command(name = "imbal", version, about = "Class-imbalance experiments on small leaf-disease images")]
struct Cli {
    /// Output directory (default: $IMBAL_OUT, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the run or generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic long-tailed dataset to PNG files plus a manifest.
    Generate {
        /// SyntheticSpec as TOML or JSON; the desk-scale default otherwise.
        spec: Option<PathBuf>,
    },
    /// List registered experiments, optionally filtered by id or group.
    List { selector: Option<String> },
    /// Print an experiment's full configuration, class counts and model size.
    Describe {
        id: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate experiments, writing one directory per run.
    Run {
        ids: Vec<String>,
        /// Every experiment in a group (`table1`, `table2`, `table4`); all when bare.
        #[arg(long, num_args = 0..=1, default_missing_value = "all")]
        all: Option<String>,
        /// Experiment config file (TOML or JSON); repeatable.
        #[arg(long)]
        config: Vec<PathBuf>,
        /// Single-threaded, bit-reproducible execution.
        #[arg(long)]
        deterministic: bool,
        /// Worker processes for independent experiments.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare finished runs side by side.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Generate { spec } => {
            let out = cli.out.unwrap_or_else(|| output_root(None).join("synthetic"));
            commands::generate(spec.as_deref(), cli.seed, &out).map(|_| ())
        }
        Cmd::List { selector } => commands::list(selector.as_deref()),
        Cmd::Describe { id, config } => commands::describe(id.as_deref(), config.as_deref()),
        Cmd::Run {
            ids,
            all,
            config,
            deterministic,
            jobs,
            epochs,
        } => commands::run(&RunArgs {
            ids,
            all,
            config,
            seed: cli.seed,
            deterministic,
            epochs,
            out: cli.out,
            jobs,
        })
        .map(|_| ()),
        Cmd::Report { runs } => commands::report(&runs, cli.out.as_deref()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
