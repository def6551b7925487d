use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use mscluster::pipeline::{self, ExperimentSpec, Status};

#[derive(Parser)]
#[command(name = "msc", version, about = "Uncertainty-space clustering for multiscale elliptic solves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training and test permeability fields.
    Generate(Common),
    /// Pretrain the adversary and train one cluster model per neighborhood.
    Train(Common),
    /// Mean error ratio over the test set for every cluster and basis count.
    SweepClusters(Common),
    /// Cluster method against per-realization bases.
    Compare(Common),
    /// Reconstruction-only training against reconstruction plus perceptual loss.
    Ablate(Common),
}

fn load_spec(path: Option<&Path>) -> mscluster::Result<ExperimentSpec> {
    match path {
        Some(p) => ExperimentSpec::parse(&std::fs::read_to_string(p)?),
        None => Ok(ExperimentSpec::default()),
    }
}

fn run(command: Command) -> mscluster::Result<Status> {
    let (Command::Generate(c)
    | Command::Train(c)
    | Command::SweepClusters(c)
    | Command::Compare(c)
    | Command::Ablate(c)) = &command;
    let spec = load_spec(c.config.as_deref())?;
    let out = c.out.clone();
    pipeline::with_pool(move || match command {
        Command::Generate(_) => pipeline::cmd_generate(&spec, &out).map(|_| Status::Ok),
        Command::Train(_) => pipeline::cmd_train(&spec, &out),
        Command::SweepClusters(_) => pipeline::cmd_sweep_clusters(&spec, &out).map(|r| {
            println!("{}", pipeline::sweep_csv(&r.rows).trim_end());
            Status::Ok
        }),
        Command::Compare(_) => pipeline::cmd_compare(&spec, &out).map(|r| {
            println!("{}", pipeline::compare_csv(&r.rows).trim_end());
            Status::Ok
        }),
        Command::Ablate(_) => pipeline::cmd_ablate(&spec, &out).map(|(arms, status)| {
            for a in arms {
                println!(
                    "{}: held-out basis mse {:.6e}, mean error ratio {:.6e}",
                    a.name, a.heldout_basis_mse, a.mean_error_ratio
                );
            }
            status
        }),
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial { failures }) => {
            error!("{failures} jobs failed");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
