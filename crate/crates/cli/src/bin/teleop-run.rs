//! Scenario runner: drives scripted clients against a session stack and
//! reports one JSON record per assertion.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use teleop_cli::{init_logging, read_text};
use teleop_core::scenario::{parse_scenario, run_scenario, RunOptions, Transport};

#[derive(Parser)]
#[command(name = "teleop-run", about = "Run a scenario file and evaluate its assertions")]
struct Cli {
    scenario: PathBuf,
    /// Overrides the seed in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Start session, robot and relay servers on loopback TCP instead of
    /// calling them in process.
    #[arg(long)]
    spawn_local: bool,
    /// JSONL report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let text = read_text(&cli.scenario)?;
    let scenario = parse_scenario(&text).with_context(|| format!("in {}", cli.scenario.display()))?;
    let options = RunOptions {
        seed: cli.seed,
        transport: if cli.spawn_local { Transport::Tcp } else { Transport::InProcess },
        ..RunOptions::default()
    };
    let report = run_scenario(&scenario, &options)?;
    let jsonl = report.to_jsonl();
    match &cli.report {
        Some(path) => std::fs::write(path, &jsonl).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{jsonl}"),
    }
    for o in &report.outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        let target = o.target.as_deref().map(|t| format!(" [{t}]")).unwrap_or_default();
        eprintln!("{status} {}{target}: {}", o.assertion, o.detail);
    }
    eprintln!(
        "{}: seed {}, {} actions, {} executed command(s), world_seq {}",
        report.name, report.seed, report.stats.actions, report.stats.executed_commands, report.stats.final_world_seq
    );
    Ok(report.passed())
}
