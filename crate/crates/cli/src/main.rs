use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vitac_core::harness::{
    collect_demos, combined_csv, demos_for, evaluate, load_policy, pretrain_encoders, read_reports, run_matrix, split, summary_text,
    train_cell, write_dataset, write_outputs, CellSpec, Config, EncoderPair, MatrixOutcome, MetricsReport,
};
use vitac_core::contrastive::write_loss_csv;
use vitac_core::math::derive_seed;
use vitac_core::policy::Modality;
use vitac_core::sim::Env;

#[derive(Parser)]
#[command(name = "vitac", version, about = "Visuo-tactile imitation learning experiments")]
struct Cli {
    /// TOML config layers, applied in order over the defaults.
    #[arg(short, long = "config", global = true)]
    configs: Vec<PathBuf>,
    /// Dotted-path overrides such as `experiment.eval_episodes=10`.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CellArgs {
    #[arg(long)]
    modality: Modality,
    /// Use freshly initialised encoders instead of pretrained ones.
    #[arg(long)]
    scratch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations to a dataset directory.
    Collect {
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastively pretrain the vision and tactile encoders.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured policy head for one cell.
    Train {
        #[command(flatten)]
        cell: CellArgs,
        /// Encoder checkpoint prefix from `pretrain`; pretrains in place if absent.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained policy checkpoint.
    Eval {
        #[command(flatten)]
        cell: CellArgs,
        /// Policy checkpoint prefix from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment grid.
    Matrix {
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the combined CSV and summary from a matrix directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn cell_spec(cfg: &Config, args: &CellArgs) -> CellSpec {
    CellSpec { policy: cfg.experiment.policy, modality: args.modality, pretrained: !args.scratch }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = Config::load(&cli.configs, &cli.overrides).context("loading config")?;
    match cli.command {
        Command::Collect { out } => {
            cfg.write_resolved(&out)?;
            let env = Env::new(cfg.env.clone())?;
            let e = &cfg.experiment;
            let demos = collect_demos(&env, &cfg.sensors, e.demo_count, e.expert_noise_std, cfg.seeds.data)?;
            write_dataset(&out, &demos)?;
            println!("wrote {} trajectories to {}", demos.len(), out.display());
        }
        Command::Pretrain { out } => {
            cfg.write_resolved(&out)?;
            let demos = demos_for(&cfg)?;
            let (train, _) = split(&demos, cfg.experiment.train_frac, cfg.seeds.data)?;
            let (pair, report) = pretrain_encoders(&cfg, &train)?;
            pair.save(&out.join("encoders"))?;
            write_loss_csv(&out.join("pretrain_loss.csv"), &report.curve)?;
            let top1 = report.curve.last().map_or(f64::NAN, |r| r.retrieval_top1);
            println!("saved encoders to {}; final in-batch retrieval {top1:.3}", out.join("encoders").display());
        }
        Command::Train { cell, encoders, out } => {
            cfg.write_resolved(&out)?;
            let spec = cell_spec(&cfg, &cell);
            let demos = demos_for(&cfg)?;
            let (train, val) = split(&demos, cfg.experiment.train_frac, cfg.seeds.data)?;
            let pair = match (&encoders, spec.pretrained) {
                (Some(prefix), true) => EncoderPair::load(&cfg, prefix)?,
                (None, true) => pretrain_encoders(&cfg, &train)?.0,
                (_, false) => EncoderPair::init(&cfg)?,
            };
            let (policy, report) = train_cell(&cfg, &spec, &pair, &train)?;
            policy.save(&out.join("policy"))?;
            let val_loss = policy.validation_loss(&val, derive_seed(cfg.seeds.train, 99))?;
            write_json(&out.join("train_report.json"), &report)?;
            println!("{}: validation loss {val_loss:.6}", spec.name());
        }
        Command::Eval { cell, checkpoint, out } => {
            cfg.write_resolved(&out)?;
            let spec = cell_spec(&cfg, &cell);
            let mut policy = load_policy(&cfg, &spec, &checkpoint)?;
            let env = Env::new(cfg.env.clone())?;
            let e = &cfg.experiment;
            let eps = evaluate(policy.as_policy(), &env, &cfg.sensors, e.eval_episodes, e.eval_noise_std_mm, cfg.seeds.eval)?;
            let mut report =
                MetricsReport::from_episodes(&spec, &eps, cfg.seeds.eval, spec.train_seed(&cfg.seeds), e.eval_noise_std_mm);
            report.metadata = policy.metadata();
            write_json(&out.join(format!("{}.json", spec.name())), &report)?;
            print!("{}", combined_csv(std::slice::from_ref(&report)));
        }
        Command::Matrix { out } => {
            let outcome = run_matrix(&cfg, &out)?;
            print!("{}", summary_text(&outcome));
            return Ok(outcome.failures.is_empty());
        }
        Command::Report { dir } => {
            let reports = read_reports(&dir)?;
            if reports.is_empty() {
                bail!("no cell reports under {}", dir.join("cells").display());
            }
            let outcome = MatrixOutcome { reports, failures: Vec::new() };
            write_outputs(&dir, &outcome)?;
            print!("{}", summary_text(&outcome));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
