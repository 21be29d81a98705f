//! Stream relay over TCP.

use std::net::TcpListener;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use teleop_cli::init_logging;
use teleop_core::net::serve_relay;
use teleop_core::relay::{Relay, RelayConfig};

#[derive(Parser)]
#[command(name = "relay-server", about = "Fan synthetic frame streams out to subscribers")]
struct Cli {
    #[arg(long, default_value = "127.0.0.1:7500")]
    listen: String,
    #[arg(long, default_value_t = 1 << 20)]
    max_frame_bytes: usize,
    /// Per-client delivery queue; the oldest frame is dropped when full.
    #[arg(long, default_value_t = 8)]
    queue_bound: usize,
    #[arg(long, default_value_t = 2000)]
    probe_timeout_ms: u64,
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let cli = Cli::parse();
    anyhow::ensure!(cli.queue_bound > 0, "--queue-bound must be positive");
    let relay = Relay::new(RelayConfig {
        max_frame_bytes: cli.max_frame_bytes,
        queue_bound: cli.queue_bound,
        probe_timeout: Duration::from_millis(cli.probe_timeout_ms),
    });
    let listener = TcpListener::bind(&cli.listen).with_context(|| format!("binding {}", cli.listen))?;
    log::info!("relay on {}", listener.local_addr()?);
    serve_relay(relay, listener).join().ok();
    Ok(())
}
