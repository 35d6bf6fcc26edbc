use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semcom::experiments::{self, CommandReport, ExperimentConfig, RunContext};

#[derive(Parser)]
#[command(name = "semcom", version, about = "Semantic image transmission experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transmit every image once and write per-object tables
    Simulate(Common),
    /// Sweep the Conf-SemCom exponent over distances
    SweepEta(Common),
    /// Train the diffusion allocator on one scene
    TrainDiffusion(Common),
    /// Compare full-frame and crop-only byte counts
    BytesReport(Common),
    /// Run the SimAM and gnConv checks
    KernelsCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (else $SEMCOM_OUT, else the config's)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write sent and received crops as PNG (simulate only)
    #[arg(long)]
    dump_crops: bool,
}

fn run(cli: Cli) -> semcom::Result<CommandReport> {
    let (common, cmd): (&Common, fn(&RunContext) -> semcom::Result<CommandReport>) = match &cli.command {
        Command::Simulate(c) => (c, experiments::cmd_simulate),
        Command::SweepEta(c) => (c, experiments::cmd_sweep_eta),
        Command::TrainDiffusion(c) => (c, experiments::cmd_train_diffusion),
        Command::BytesReport(c) => (c, experiments::cmd_bytes_report),
        Command::KernelsCheck(c) => (c, experiments::cmd_kernels_check),
    };
    let config = ExperimentConfig::load(&common.config)?;
    let ctx = RunContext::new(config, common.seed, common.out.clone(), common.dump_crops);
    cmd(&ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
