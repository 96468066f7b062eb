use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fairstg::commands::{self, EvaluateOptions};
use fairstg::config::Config;
use fairstg::{CliError, Result};
use fairstg_core::trainer::Ablation;

#[derive(Parser)]
#[command(name = "fairstg", version, about = "Fairness-aware spatiotemporal forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.mu_f=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    #[value(name = "no_fe")]
    NoFe,
    #[value(name = "no_fo")]
    NoFo,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoFe => Ablation::NoFe,
            AblationArg::NoFo => Ablation::NoFo,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw data and write split, adjacency and manifest artifacts.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run two-stage training and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Score a checkpoint on the test split and write a fairness report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Write retrieved neighbors and gate values to compensatory.csv.
        #[arg(long)]
        dump_compensatory: bool,
        /// Write per-node MAPE to error_map.csv.
        #[arg(long)]
        emit_error_map: bool,
    },
    /// Compare report B against base report A.
    Compare {
        #[command(flatten)]
        common: Common,
        report_a: PathBuf,
        report_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-node MAPE improvements to error_map.csv (needs --out).
        #[arg(long)]
        emit_error_map: bool,
    },
    /// Generate the two-group synthetic benchmark.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<Config> {
    Config::load(common.config.as_deref(), &common.overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common, out } => {
            let m = commands::prepare(&load(&common)?, &out)?;
            println!("prepared {} nodes x {} steps into {}", m.nodes, m.steps, out.display());
        }
        Command::Train { common, out, ablation } => {
            let config = load(&common)?;
            let mut stdout = std::io::stdout().lock();
            let s = commands::train(&config, &out, ablation.map(Into::into), &mut stdout)?;
            println!(
                "best_epoch={} stage={} val_mae={:.6} checkpoint={}",
                s.best_epoch,
                s.stage.as_str(),
                s.best_val_mae,
                s.checkpoint.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            out,
            ablation,
            dump_compensatory,
            emit_error_map,
        } => {
            let opts = EvaluateOptions {
                ablation: ablation.map(Into::into),
                dump_compensatory,
                emit_error_map,
            };
            let e = commands::evaluate(&load(&common)?, &checkpoint, &out, opts)?;
            let r = &e.report;
            println!(
                "mae={:.6} rmse={:.6} mae_var={:.6} challenging30_mae={:.6} report={}",
                r.overall.mae,
                r.overall.rmse,
                r.overall.mae_var,
                r.challenging30.mae,
                out.join(commands::REPORT_FILE).display()
            );
        }
        Command::Compare {
            common,
            report_a,
            report_b,
            out,
            emit_error_map,
        } => {
            let cmp = commands::compare(&load(&common)?, &report_a, &report_b, out.as_deref(), emit_error_map)?;
            println!("{}", serde_json::to_string_pretty(&cmp).expect("comparison serializes"));
        }
        Command::Synth { common, out } => {
            let d = commands::synth(&load(&common)?, &out)?;
            println!(
                "wrote {} nodes x {} steps to {}",
                d.table.node_ids.len(),
                d.table.timestamps.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
