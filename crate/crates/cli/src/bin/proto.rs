//! Application prototyper: module registry and AppSpec composition.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use teleop_cli::{init_logging, parse_key_value, read_text};
use teleop_core::prototyper::{
    compose_app, parse_app, parse_descriptor, validate_against_registry, validate_app, ComposeRequest, Registry,
    Selection,
};
use teleop_core::session::Platform;
use teleop_core::FileStore;

#[derive(Parser)]
#[command(name = "proto", about = "Register module descriptors and compose application XML")]
struct Cli {
    /// Registry file.
    #[arg(long, global = true, default_value = "modules.registry")]
    registry: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add a module descriptor to the registry.
    Register { descriptor: PathBuf },
    /// List registered modules.
    List,
    /// Compose an application from registered modules.
    Compose {
        #[arg(long)]
        platform: Platform,
        /// `name:VARIANT[:units]`, repeatable; order sets the degradation priority.
        #[arg(long = "select", required = true)]
        selections: Vec<Selection>,
        #[arg(long, default_value = "app")]
        name: String,
        /// `key=value`, repeatable.
        #[arg(long = "option", value_parser = parse_key_value)]
        options: Vec<(String, String)>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an application file, against the registry when one exists.
    Validate { app: PathBuf },
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let registry = Registry::new(FileStore::new(&cli.registry));
    match cli.command {
        Command::Register { descriptor } => {
            let text = read_text(&descriptor)?;
            let desc = parse_descriptor(&text).with_context(|| format!("in {}", descriptor.display()))?;
            registry.register(&desc)?;
            println!("registered {} {}", desc.name, desc.version);
        }
        Command::List => {
            for d in registry.list()? {
                let variants: Vec<&str> = d.variants.iter().map(|v| v.as_str()).collect();
                let units = if d.degradable {
                    format!("degradable {} {}/{}", d.unit_name, d.default_units, d.max_units)
                } else {
                    "fixed".to_string()
                };
                println!("{}\t{}\t{}\t{}", d.name, d.version, variants.join(","), units);
            }
        }
        Command::Compose {
            platform,
            selections,
            name,
            options,
            out,
        } => {
            let modules = registry.list()?;
            let xml = compose_app(
                &modules,
                &ComposeRequest {
                    name,
                    platform,
                    options,
                    selection: selections,
                },
            )?;
            match out {
                Some(path) => std::fs::write(&path, &xml).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{xml}"),
            }
        }
        Command::Validate { app } => {
            let text = read_text(&app)?;
            let spec = parse_app(&text).with_context(|| format!("in {}", app.display()))?;
            let mut violations = validate_app(&spec);
            if cli.registry.exists() {
                violations.extend(validate_against_registry(&spec, &registry.list()?));
            }
            if violations.is_empty() {
                println!("{}: ok ({} modules)", app.display(), spec.modules.len());
                return Ok(ExitCode::SUCCESS);
            }
            for v in &violations {
                println!("{v}");
            }
            bail!("{} violation(s)", violations.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}
