//! Command-line driver: run scenario files, run built-in experiments,
//! validate configurations. Exit codes: 0 success, 2 invalid input or
//! failed validation, 1 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vmk_sim::builtins;
use vmk_sim::machine::Machine;
use vmk_sim::metrics::RunMetrics;
use vmk_sim::scenario::Scenario;
use vmk_sim::Error;

#[derive(Parser)]
#[command(
    name = "vmk-sim",
    version,
    about = "Deterministic simulator of a virtualized multikernel"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and write trace.csv plus metrics.json.
    Run {
        scenario: PathBuf,
        /// Override the scenario's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the horizon, in cycles.
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Run a named built-in experiment and write its artifacts.
    Demo {
        /// One of: recovery-local, recovery-remote, isolation,
        /// msgbench, interrupts, forkwait, shared-nic.
        name: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory (default: out/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the message benchmark at 5000 trials per size
        /// instead of 200.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Check a scenario file: structure, references, schedulability.
    Validate { scenario: PathBuf },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Scenario(_)
        | Error::Config(_)
        | Error::Admission { .. }
        | Error::UnknownBuiltin(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            horizon,
        } => {
            let mut scn = load_scenario(&scenario)?;
            if let Some(s) = seed {
                scn.sim.seed = s;
            }
            if let Some(h) = horizon {
                scn.sim.horizon_ms = None;
                scn.sim.horizon_cycles = Some(h);
            }
            let mut m = Machine::build(&scn)?;
            m.run()?;
            m.check_invariants()?;
            let metrics = RunMetrics::from_trace(m.trace());

            let dir = out.unwrap_or_else(|| PathBuf::from("out"));
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("trace.csv"), m.trace().to_csv_string())?;
            std::fs::write(dir.join("metrics.json"), metrics.to_json())?;
            std::fs::write(dir.join("layout.txt"), m.mem.layout_report())?;

            println!(
                "ran {} cycles, {} trace records, seed {}",
                metrics.horizon_cycles, metrics.records, scn.sim.seed
            );
            println!(
                "vm_exits={} ept_violations={} deadline_misses={}",
                metrics.vm_exits_total, metrics.ept_violations, metrics.deadline_misses
            );
            for r in &metrics.recoveries {
                println!(
                    "recovery mode={} sandbox={} downtime={} cycles",
                    r.mode, r.sandbox, r.downtime_cycles
                );
            }
            println!("trace sha256 {}", m.trace().csv_sha256());
            println!("wrote {}", dir.display());
            Ok(())
        }
        Cmd::Demo {
            name,
            seed,
            out,
            paper_scale,
        } => {
            let demo = builtins::run_builtin(&name, seed, paper_scale)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&demo.name));
            builtins::emit(&demo, &dir)?;
            for line in &demo.lines {
                println!("{line}");
            }
            println!("trace sha256 {}", demo.trace_sha256);
            let names: Vec<&str> = demo.files.iter().map(|(n, _)| n.as_str()).collect();
            println!("wrote {} ({})", dir.display(), names.join(", "));
            Ok(())
        }
        Cmd::Validate { scenario } => {
            let scn = load_scenario(&scenario)?;
            let horizon = scn.sim.horizon()?;
            println!(
                "ok: {} sandboxes, {} vcpus, {} channels, {} workloads, horizon {} cycles",
                scn.sandboxes.len(),
                scn.vcpus.len(),
                scn.channels.len(),
                scn.workloads.len(),
                horizon
            );
            Ok(())
        }
    }
}
