//! Module runtime: loads an application file, probes latency through the
//! relay and degrades modules when it rises.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::Parser;
use teleop_cli::{init_logging, read_text};
use teleop_core::net::{SessionCoreLink, TcpFrameSource, TcpStreamViewer};
use teleop_core::prototyper::{parse_app, parse_descriptor, validate_app, ModuleDescriptor};
use teleop_core::runtime::{BuiltinFactory, ControllerConfig, Core, StreamLink, TrajectorySwitch, Variant};
use teleop_core::session::Platform;
use teleop_core::{Body, StateReport};

#[derive(Parser)]
#[command(name = "core-server", about = "Run the module runtime for an application file")]
struct Cli {
    #[arg(long)]
    app: PathBuf,
    /// Session server; module reports are broadcast to clients through it.
    #[arg(long)]
    session: Option<String>,
    /// Relay server for camera streams and latency probes.
    #[arg(long)]
    relay: Option<String>,
    /// Line-delimited signal log.
    #[arg(long)]
    signal_log: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    probe_interval_ms: u64,
    /// Stop after this long; runs until killed when absent.
    #[arg(long)]
    duration_ms: Option<u64>,
    /// `descriptor.xml@MS`: load a module while running.
    #[arg(long = "hot-add")]
    hot_adds: Vec<String>,
    /// Push synthetic frames for each camera source at this rate.
    #[arg(long)]
    feed_hz: Option<f64>,
}

struct HotAddPlan {
    at_ms: u64,
    descriptor: ModuleDescriptor,
}

fn parse_hot_add(s: &str) -> anyhow::Result<HotAddPlan> {
    let (path, at) = s.rsplit_once('@').unwrap_or((s, "0"));
    let at_ms = at.parse().with_context(|| format!("bad time in --hot-add '{s}'"))?;
    let descriptor = parse_descriptor(&read_text(path.as_ref())?).with_context(|| format!("in {path}"))?;
    Ok(HotAddPlan { at_ms, descriptor })
}

fn variant_for(platform: Platform, d: &ModuleDescriptor) -> Variant {
    let preferred = if platform == Platform::Mobile { Variant::Mobile } else { Variant::Classic };
    if d.supports(preferred) {
        preferred
    } else {
        *d.variants.iter().next().expect("descriptors carry at least one variant")
    }
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let cli = Cli::parse();
    let spec = parse_app(&read_text(&cli.app)?).with_context(|| format!("in {}", cli.app.display()))?;
    let violations = validate_app(&spec);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{v}");
        }
        bail!("{} is not a valid application", cli.app.display());
    }
    let mut hot_adds: Vec<HotAddPlan> = cli.hot_adds.iter().map(|s| parse_hot_add(s)).collect::<Result<_, _>>()?;
    hot_adds.sort_by_key(|h| h.at_ms);

    let camera_units = spec
        .modules
        .iter()
        .filter(|m| m.descriptor.name == "camera")
        .map(|m| m.descriptor.max_units)
        .chain(hot_adds.iter().filter(|h| h.descriptor.name == "camera").map(|h| h.descriptor.max_units))
        .max()
        .unwrap_or(0);
    let sources = BuiltinFactory::camera_source_ids(camera_units);

    let viewer = match &cli.relay {
        Some(addr) => {
            if let Some(hz) = cli.feed_hz {
                spawn_feeds(addr, &sources, hz)?;
            }
            Some(Arc::new(
                TcpStreamViewer::connect(addr, "core").with_context(|| format!("connecting to relay {addr}"))?,
            ))
        }
        None => None,
    };
    let session = match &cli.session {
        Some(addr) => Some(Arc::new(
            SessionCoreLink::connect(addr).with_context(|| format!("connecting to session {addr}"))?,
        )),
        None => None,
    };
    let factory = BuiltinFactory {
        streams: viewer.clone().map(|v| v as Arc<dyn StreamLink>),
        camera_sources: sources,
        robot: session.clone().map(|s| s as Arc<dyn TrajectorySwitch>),
    };
    let config = ControllerConfig::default();
    let (mut core, reports) = Core::from_app(&spec, config, Box::new(factory))?;
    for r in &reports {
        log::info!("{}: {:?} {} units {}", r.module, r.status, r.active_units, r.detail);
    }

    let started = Instant::now();
    let mut forwarded = 0;
    let mut next_probe = 0;
    let mut next_tick = config.period_ms;
    loop {
        let now = started.elapsed().as_millis() as u64;
        if cli.duration_ms.is_some_and(|d| now >= d) {
            break;
        }
        while hot_adds.first().is_some_and(|h| h.at_ms <= now) {
            let h = hot_adds.remove(0);
            core.set_time(now);
            let variant = variant_for(spec.platform, &h.descriptor);
            match core.hot_add(&h.descriptor, variant, None) {
                Ok(r) => log::info!("hot-added {}: {:?}", r.module, r.status),
                Err(e) => log::error!("hot-add {} failed: {e}", h.descriptor.name),
            }
        }
        if now >= next_probe {
            next_probe = now + cli.probe_interval_ms;
            if let Some(v) = &viewer {
                match v.probe(Duration::from_secs(2)) {
                    Ok(mut sample) => {
                        sample.ts_ms = now;
                        core.observe_latency(&sample);
                    }
                    Err(e) => log::warn!("latency probe failed: {e}"),
                }
            }
        }
        if now >= next_tick {
            next_tick += config.period_ms;
            for (module, degree) in core.tick(now) {
                log::info!("SAFE {degree} -> {module} (estimate {:.1} ms)", core.estimate().unwrap_or(0.0));
            }
        }
        if let Some(s) = &session {
            for env in &core.signal_log()[forwarded..] {
                if let Body::StateReport(r) = &env.body {
                    forward(s, r.clone());
                }
            }
        }
        forwarded = core.signal_log().len();
        std::thread::sleep(Duration::from_millis(5));
    }

    if let Some(path) = &cli.signal_log {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        core.write_signal_log(BufWriter::new(file))?;
    }
    Ok(())
}

fn forward(link: &SessionCoreLink, report: StateReport) {
    if let Err(e) = link.forward_report(report) {
        log::warn!("forwarding report failed: {e}");
    }
}

fn spawn_feeds(addr: &str, sources: &[String], hz: f64) -> anyhow::Result<()> {
    anyhow::ensure!(hz > 0.0 && hz.is_finite(), "--feed-hz must be positive");
    for id in sources {
        let mut source = TcpFrameSource::connect(addr, id, hz).with_context(|| format!("registering source {id}"))?;
        std::thread::spawn(move || loop {
            if source.push_synthetic(4096).is_err() {
                return;
            }
            std::thread::sleep(Duration::from_secs_f64(1.0 / hz));
        });
    }
    Ok(())
}
