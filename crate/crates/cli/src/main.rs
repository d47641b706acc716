//! `endosim` command line.

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use endosim_core::harness::{
    attack_matrix, attacks::render_matrix, fuzz::run_fuzz, interleave_explore, load_scenario,
    monte_carlo_guess, run_scenario, signal_storm,
};

#[derive(Parser)]
#[command(
    name = "endosim",
    version,
    about = "Deterministic in-process isolation monitor simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario once, events in file order.
    Run {
        #[arg(long)]
        variant: String,
        /// Scenario file, or a name in the scenario directory.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<String>,
    },
    /// Run every attack under every gate family and print the matrix.
    Attacks {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate the chance of guessing the randomized gadget.
    Montecarlo {
        #[arg(long, default_value_t = 16)]
        pages: u64,
        #[arg(long, default_value_t = 32)]
        freq: u64,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random syscall traces; reports safety violations and successful attacks.
    Fuzz {
        #[arg(long, default_value_t = 10_000)]
        traces: u64,
        #[arg(long, default_value_t = 100)]
        syscalls: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Explore every interleaving of a scenario's threads up to a preemption bound.
    Interleave {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 6)]
        depth: u32,
        #[arg(long, default_value = "secc_eph")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<String>,
    },
    /// Every sequence of signal events up to a length bound, checking the queue invariants.
    Storm {
        #[arg(long, default_value_t = 5)]
        depth: u32,
        #[arg(long, default_value = "secc_eph")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("endosim: {msg}");
    ExitCode::from(1)
}

fn emit(report: &endosim_core::harness::Report, json: Option<&str>) -> ExitCode {
    let text = report.to_json();
    println!("{text}");
    if let Some(path) = json {
        if let Err(e) = std::fs::write(path, format!("{text}\n")) {
            return fail(format!("{path}: {e}"));
        }
    }
    ExitCode::from(report.exit_code() as u8)
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run {
            variant,
            scenario,
            seed,
            json,
        } => {
            let sc = match load_scenario(&scenario) {
                Ok(sc) => sc,
                Err(e) => return fail(e),
            };
            match run_scenario(&variant, &sc, seed) {
                Ok(r) => emit(&r, json.as_deref()),
                Err(e) => fail(e),
            }
        }
        Cmd::Attacks { seed } => match attack_matrix(seed) {
            Ok(rows) => {
                print!("{}", render_matrix(&rows));
                if rows.iter().all(|r| r.matches()) {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(e),
        },
        Cmd::Montecarlo {
            pages,
            freq,
            trials,
            seed,
        } => {
            if pages == 0 || freq == 0 {
                return fail("pages and freq must be positive");
            }
            let r = monte_carlo_guess(pages, freq, trials, seed);
            println!("{}", serde_json::to_string_pretty(&r).expect("serializes"));
            ExitCode::SUCCESS
        }
        Cmd::Fuzz {
            traces,
            syscalls,
            seed,
        } => {
            let r = run_fuzz(traces, syscalls, seed);
            println!("{}", serde_json::to_string_pretty(&r).expect("serializes"));
            if r.sp_violations > 0 || r.breaches > 0 {
                ExitCode::from(2)
            } else if r.clean() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Cmd::Interleave {
            scenario,
            depth,
            variant,
            seed,
            json,
        } => {
            let sc = match load_scenario(&scenario) {
                Ok(sc) => sc,
                Err(e) => return fail(e),
            };
            match interleave_explore(&variant, &sc, depth, seed) {
                Ok(r) => emit(&r, json.as_deref()),
                Err(e) => fail(e),
            }
        }
        Cmd::Storm {
            depth,
            variant,
            seed,
        } => match signal_storm(&variant, depth, seed) {
            Ok(r) => {
                println!("{}", serde_json::to_string_pretty(&r).expect("serializes"));
                if r.clean() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => fail(e),
        },
    }
}
