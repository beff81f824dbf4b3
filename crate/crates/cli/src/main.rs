//! `compflow` command-line interface: one subcommand per pipeline stage.

mod audit;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "compflow",
    version,
    about = "Composite flow matching for off-dynamics reinforcement learning"
)]
struct Cli {
    /// Append the path of every input file read by this process to PATH.
    #[arg(long, global = true, value_name = "PATH")]
    audit_file_access: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    Offline,
    Online,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out the behavior policy and write a transition CSV.
    GenDataset {
        /// Environment pair: gaussian, pointmass or patrol.
        #[arg(long)]
        env: String,
        /// Number of transitions (default: data.offline_size).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Which dynamics to roll out in.
        #[arg(long, value_enum, default_value_t = Member::Offline)]
        member: Member,
        /// Output CSV (default: <env>-<member>-<n>-seed<seed>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the noise-to-offline-data flow.
    TrainOfflineFlow {
        /// Offline transition CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "offline_flow.ckpt")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of rows held out for the reported loss.
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the online flow that carries offline samples to online next states.
    TrainOnlineFlow {
        #[arg(long)]
        offline_flow: PathBuf,
        /// Online transition CSV.
        #[arg(long)]
        data: PathBuf,
        /// Warm-start from an existing online flow checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "online_flow.ckpt")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Estimate the dynamics gap for every (s, a) row of a dataset.
    EstimateGap {
        #[arg(long)]
        offline_flow: PathBuf,
        #[arg(long)]
        online_flow: PathBuf,
        /// CSV whose (s, a) columns are queried.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gap_report.csv")]
        out: PathBuf,
        /// Latent samples per estimate (default: gap.m).
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run online training; resumes from the latest checkpoint when present.
    Train {
        /// compflow, sac or bcsac (overrides rl.method).
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated seeds (overrides run.seeds).
        #[arg(long)]
        seeds: Option<String>,
        /// Group name used by `plot` (default: the method).
        #[arg(long)]
        label: Option<String>,
        /// Offline transition CSV; generated per seed when absent.
        #[arg(long)]
        offline_data: Option<PathBuf>,
        /// Pretrained offline flow; trained per seed when absent.
        #[arg(long)]
        offline_flow: Option<PathBuf>,
        /// Run seeds concurrently instead of one after another.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the latest checkpoint of a run in the online dynamics.
    Eval {
        /// Seed directory of a run (runs/<hash>/<seed>).
        #[arg(long)]
        run: PathBuf,
        /// Episodes (default: rl.eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render learning curves of one or more runs as SVG.
    Plot {
        /// Seed directories or their metrics.csv files; grouped by run label.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "learning_curve.svg")]
        out: PathBuf,
    },
}

const SUBCOMMANDS: &[&str] = &[
    "gen-dataset",
    "train-offline-flow",
    "train-online-flow",
    "estimate-gap",
    "train",
    "eval",
    "plot",
];

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = compflow::persist::keys_help();
    let mut cmd = Cli::command().after_help(keys.clone());
    for name in SUBCOMMANDS {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(keys.clone()));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    audit::init(cli.audit_file_access);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
