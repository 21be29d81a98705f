//! Simulated robot server; connects to a session server as its robot peer.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use teleop_cli::{init_logging, read_text};
use teleop_core::net::run_robot_peer;
use teleop_core::robot::{RobotConfig, RobotServer};

#[derive(Parser)]
#[command(name = "robot-server", about = "Run the simulated 6-DoF robot")]
struct Cli {
    #[arg(long, default_value = "127.0.0.1:7400")]
    connect: String,
    /// DH table, limits, speed and fixture radii.
    #[arg(long)]
    robot: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let cli = Cli::parse();
    let config = match &cli.robot {
        Some(p) => RobotConfig::from_xml(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RobotConfig::default(),
    };
    let robot = Arc::new(RobotServer::new(config));
    let peer = run_robot_peer(robot, &cli.connect, "robot-server")
        .with_context(|| format!("connecting to {}", cli.connect))?;
    log::info!("robot attached to {}", cli.connect);
    peer.wait();
    log::info!("session connection closed");
    Ok(())
}
