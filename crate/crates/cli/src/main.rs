//! `dtmem`: dataset generation, pre-training, LoRA fine-tuning, evaluation
//! and plots for the memory-augmented decision transformer.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dtmem_core::config::Profile;

#[derive(Parser)]
#[command(name = "dtmem", version, about, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct GlobalArgs {
    /// JSON config of flat dotted keys, e.g. {"train.lr": 0.001}.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base settings the config file and overrides apply to.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    pub profile: ProfileArg,

    /// Override one config key. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the task suite's offline datasets.
    GenData(commands::GenData),
    /// Train a model on every TRAIN task.
    Pretrain(commands::Pretrain),
    /// Attach LoRA adapters and train them on TEST-task data.
    Finetune(commands::Finetune),
    /// Roll out a checkpoint on suite tasks.
    Eval(commands::Eval),
    /// Pre-train and evaluate one model per memory size.
    Sweep(commands::Sweep),
    /// Draw SVG charts from evaluation and sweep reports.
    Plot(commands::Plot),
    /// Print parameter counts per module.
    Info(commands::Info),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
