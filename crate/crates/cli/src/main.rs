use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ringsim::lotr::{canonical_system, dump_table, LotrHandle};
use ringsim::machine::MachineState;
use ringsim::scenario::{
    apply_config, compare_mechanisms, parse_scenario, run_scenario, CostModel, Scenario, WEIGHT_KEYS,
};
use ringsim::verifier::verify;

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_FILE: u8 = 3;

#[derive(Parser)]
#[command(name = "ringsim", version, about = "Ring/segment machine simulator with a privileged-user mode")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the security requirements and run the mutation suite.
    Verify {
        /// Configuration script applied on top of the canonical layout.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a scenario script.
    Run { file: PathBuf },
    /// Print the canonical LDT.
    DumpLdt,
    /// Compare privcall, mprotect-pair and RPC step costs for a workload.
    Bench {
        workload: PathBuf,
        /// Override a cost weight, e.g. `--weight message=80`.
        #[arg(long = "weight", value_name = "KEY=VALUE", value_parser = parse_weight)]
        weights: Vec<(String, f64)>,
    },
}

fn parse_weight(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if !WEIGHT_KEYS.contains(&k) {
        return Err(format!("unknown weight `{k}` (expected one of {})", WEIGHT_KEYS.join(", ")));
    }
    let v: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.to_string(), v))
}

/// A failure that ends the command with a specific exit code.
struct Exit(u8, String);

fn load(path: &Path) -> Result<Scenario, Exit> {
    let text = fs::read_to_string(path).map_err(|e| Exit(EXIT_FILE, format!("{}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| Exit(EXIT_FILE, format!("{}: {e}", path.display())))
}

fn configured_system(config: Option<&Path>) -> Result<(MachineState, LotrHandle), Exit> {
    let Some(path) = config else { return Ok(canonical_system()) };
    let scn = load(path)?;
    let (report, m, h) = apply_config(&scn);
    for e in &report.entries {
        if e.passed == Some(false) || matches!(e.outcome, ringsim::scenario::Observed::Fault(_)) {
            eprintln!("config line {}: {} => {}", e.line, e.source, e.outcome);
        }
    }
    if let Some(mm) = &report.mismatch {
        return Err(Exit(
            EXIT_FAIL,
            format!("config line {}: expected {}, observed {}", mm.line, mm.expected, mm.observed),
        ));
    }
    Ok((m, h))
}

fn run(cmd: Command) -> Result<u8, Exit> {
    match cmd {
        Command::Verify { config } => {
            let (m, h) = configured_system(config.as_deref())?;
            let report = verify(&m, &h);
            print!("{report}");
            Ok(if report.all_hold() && report.all_detected() { 0 } else { EXIT_FAIL })
        }
        Command::Run { file } => {
            let report = run_scenario(&load(&file)?);
            print!("{report}");
            Ok(if report.passed() { 0 } else { EXIT_FAIL })
        }
        Command::DumpLdt => {
            let (m, _) = canonical_system();
            print!("{}", dump_table(&m.ldt));
            Ok(0)
        }
        Command::Bench { workload, weights } => {
            let scn = load(&workload)?;
            let mut model = CostModel::default();
            for (k, v) in &weights {
                model.set(k, *v).map_err(|e| Exit(EXIT_USAGE, e.to_string()))?;
            }
            let table = compare_mechanisms(&scn, &model);
            print!("{table}");
            println!(
                "ordering privcall < mprotect-pair < rpc: {}",
                if table.ordering_holds() { "holds" } else { "VIOLATED" }
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, msg)) => {
            eprintln!("ringsim: {msg}");
            ExitCode::from(code)
        }
    }
}
