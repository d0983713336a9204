use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcmg::harness::{self, Command, Scenario};

#[derive(Parser)]
#[command(name = "dcmg", version, about = "DC microgrid training, estimation and dispatch experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Nominal droop steady state.
    Solve(Common),
    /// Training epoch: voltages, measurements and plan manifest.
    Train(Common),
    /// J-SISE at every controller.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train` (plan.json, train.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Bound RRMSE versus amplitude and network size.
    Crlb(Common),
    /// One training plus dispatch epoch.
    Doed(Common),
    /// Monte Carlo RRMSE against the bound.
    SweepRrmse(Common),
    /// Average RCI/QRCI surface.
    SweepRci(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Number of DERs, overriding the file.
    #[arg(long)]
    buses: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory (default: $DCMG_OUT_DIR or ./dcmg-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Sub::Solve(c) => (Command::Solve, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Estimate { common, input } => (Command::Estimate { input }, common),
        Sub::Crlb(c) => (Command::Crlb, c),
        Sub::Doed(c) => (Command::Doed, c),
        Sub::SweepRrmse(c) => (Command::SweepRrmse, c),
        Sub::SweepRci(c) => (Command::SweepRci, c),
    };
    let mut sc = match Scenario::load(&common.config, common.buses) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = common.seed {
        sc.seed = s;
    }
    if let Some(t) = common.trials {
        sc.trials = t;
    }
    let out = common.out.unwrap_or_else(harness::default_out_dir);

    match harness::run(&cmd, &sc, common.parallel) {
        Ok(report) => match harness::write_report(&out, &cmd, &sc, &report) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("cannot write results: {e}");
                ExitCode::FAILURE
            }
        },
        Err(e) if e.is_numerical() => {
            eprintln!("numerical failure: {e}");
            if let Ok(p) = harness::write_failure(&out, &cmd, &sc, &e) {
                eprintln!("diagnostics written to {}", p.display());
            }
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
