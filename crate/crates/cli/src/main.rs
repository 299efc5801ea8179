//! `comppow` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use comppow::experiment::{self, ExperimentError, Knob};
use comppow::format::g9;

#[derive(Parser)]
#[command(name = "comppow", version, about = "Component-level GPU power simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario.
    Run {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run two scenarios on the same spec and report savings and loss.
    Compare {
        base: PathBuf,
        variant: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sweep one actuator knob against the unswept scenario.
    Sweep {
        scenario: PathBuf,
        /// power_cap, freq_cap or cu_alloc:<kernel-id>
        #[arg(long)]
        knob: String,
        /// Comma-separated values (W, MHz or CUs).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Exposed/overlapped time accounting of a `stream,category,start_s,end_s` CSV.
    Overlap {
        intervals: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn validation(msg: String) -> ExperimentError {
    ExperimentError::Validation(msg)
}

fn execute(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Run { scenario, out } => {
            let m = experiment::cmd_run(&scenario, &out)?;
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "energy {} J, makespan {} s, avg power {} W",
                g9(m.energy_j.total),
                g9(m.makespan_s),
                g9(m.avg_power_w.total)
            );
        }
        Command::Compare { base, variant, out } => {
            let c = experiment::cmd_compare(&base, &variant, &out)?;
            println!("savings {} %, loss {} %", g9(c.savings_pct), g9(c.loss_pct));
        }
        Command::Sweep {
            scenario,
            knob,
            values,
            out,
        } => {
            let knob: Knob = knob.parse().map_err(validation)?;
            let values = values
                .iter()
                .filter(|v| !v.trim().is_empty())
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| validation(format!("value {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let res = experiment::cmd_sweep(&scenario, &knob, &values, &out)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} runs written to {}", res.rows.len(), out.display());
        }
        Command::Overlap { intervals, out } => {
            let r = experiment::cmd_overlap(&intervals, &out)?;
            println!(
                "overlapped {} s of {} s ({} %)",
                g9(r.overlapped_s),
                g9(r.makespan_s),
                g9(100.0 * r.fraction.overlapped)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
