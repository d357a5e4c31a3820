use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use tpia::pipeline::{exit, run, write_outputs};
use tpia::report::{Mode, RunConfig};
use tpia::Norm;

/// Globally certified three-phase infeasibility analysis.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// Feeder JSON file.
    #[arg(long)]
    feeder: PathBuf,
    /// Objective norm: l1 or l2.
    #[arg(long, default_value = "l1")]
    norm: Norm,
    /// nlp, blp or s-blp.
    #[arg(long, default_value = "s-blp")]
    mode: Mode,
    /// Half-width of the initial ΔV box, pu.
    #[arg(long, default_value_t = 0.25)]
    dv_box: f64,
    /// Relative optimality gap at which branch-and-bound stops.
    #[arg(long, default_value_t = 1e-4)]
    gap_tol: f64,
    /// Wall-clock limit for the run, seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Worker threads for bound tightening.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report JSON path; `<stem>.buses.csv` and `<stem>.sbt.json` go alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stopping threshold on the per-iteration bound change in tightening.
    #[arg(long, default_value_t = 1e-4)]
    sbt_eps: f64,
    /// Write the root relaxation (after tightening) as MPS.
    #[arg(long)]
    export_mps: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::CONFIG
            } else {
                exit::SUCCESS
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let config = RunConfig {
        feeder: cli.feeder,
        norm: cli.norm,
        mode: cli.mode,
        dv_box: cli.dv_box,
        sbt_eps: cli.sbt_eps,
        gap_tol: cli.gap_tol,
        time_limit_s: cli.time_limit,
        workers: cli.workers,
        out: cli.out,
        export_mps: cli.export_mps,
    };
    let output = match run(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    print!("{}", output.report.summary_text());
    if let Some(out) = &config.out {
        match write_outputs(&output, out) {
            Ok(files) => {
                for f in files {
                    println!("wrote {}", f.display());
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        }
    }
    ExitCode::from(output.exit_code() as u8)
}
