use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memkern::cli::{cmd_plan, cmd_report, cmd_run, cmd_verify, exit_code, Experiment};
use memkern::error::Error;

#[derive(Parser)]
#[command(
    name = "memkern",
    about = "Learn Hamiltonians and memory kernels from simulated trace experiments"
)]
struct Args {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the measurement plan and write plan.json.
    Plan { config: PathBuf },
    /// Simulate, sample, fit and learn; write reports and the shot sweep.
    Run { config: PathBuf },
    /// Run the built-in numerical self-checks.
    Verify,
    /// Summarize sweep.csv in an output directory.
    Report { dir: PathBuf },
}

fn run(args: Args) -> Result<i32, Error> {
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match args.cmd {
        Cmd::Plan { config } => {
            let exp = Experiment::load(&config)?;
            let s = cmd_plan(&exp)?;
            println!(
                "hamiltonian settings: {}\npairs: {}\nsettings: {}\nmax settings per pair: {}\nrounds: {}",
                s.hamiltonian_settings, s.pairs, s.settings, s.max_settings_per_pair, s.rounds
            );
            println!("wrote {}", exp.output_dir.join("plan.json").display());
            Ok(0)
        }
        Cmd::Run { config } => {
            let exp = Experiment::load(&config)?;
            let out = cmd_run(&exp)?;
            for f in &out.failures {
                eprintln!("failed: {f}");
            }
            print!("{}", cmd_report(&exp.output_dir)?);
            println!("wrote results to {}", exp.output_dir.display());
            Ok(if out.failures.is_empty() { 0 } else { 1 })
        }
        Cmd::Verify => {
            let checks = cmd_verify()?;
            for c in &checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!(
                    "{tag} {} = {:.3e} (threshold {:.0e})",
                    c.name, c.value, c.threshold
                );
            }
            Ok(if checks.iter().all(|c| c.pass) { 0 } else { 1 })
        }
        Cmd::Report { dir } => {
            print!("{}", cmd_report(&dir)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
