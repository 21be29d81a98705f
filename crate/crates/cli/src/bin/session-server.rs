//! Multi-user session server over TCP.

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use teleop_cli::{init_logging, read_text};
use teleop_core::net::serve_session;
use teleop_core::robot::RobotConfig;
use teleop_core::session::{SceneConfig, SessionConfig, SessionServer};
use teleop_core::FileStore;

#[derive(Parser)]
#[command(name = "session-server", about = "Serve a shared teleoperation world")]
struct Cli {
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// World store; restored at startup and rewritten after changes.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Initial scene, used when the store is empty or absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Robot config supplying the joint limits for phantom checks.
    #[arg(long)]
    robot: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    persist_interval_ms: u64,
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let cli = Cli::parse();
    let scene = match &cli.scene {
        Some(p) => SceneConfig::from_xml(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => SceneConfig::default(),
    };
    let limits = match &cli.robot {
        Some(p) => RobotConfig::from_xml(&read_text(p)?).with_context(|| format!("in {}", p.display()))?.limits,
        None => RobotConfig::default().limits,
    };
    let config = SessionConfig { limits, scene };
    let store = cli.store.as_ref().map(FileStore::new);
    let server = Arc::new(match &store {
        Some(store) => SessionServer::restore(config, store)
            .with_context(|| format!("refusing to start from {}", store.path().display()))?,
        None => SessionServer::new(config),
    });
    let listener = TcpListener::bind(&cli.listen).with_context(|| format!("binding {}", cli.listen))?;
    log::info!("session server on {} at world_seq {}", listener.local_addr()?, server.world_seq());
    let accept = serve_session(Arc::clone(&server), listener);

    let Some(store) = store else {
        accept.join().ok();
        return Ok(());
    };
    let mut persisted = None;
    loop {
        let seq = server.world_seq();
        if persisted != Some(seq) {
            match server.persist_world(&store) {
                Ok(()) => persisted = Some(seq),
                Err(e) => log::error!("persist failed: {e}"),
            }
        }
        if accept.is_finished() {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(cli.persist_interval_ms.max(1)));
    }
}
