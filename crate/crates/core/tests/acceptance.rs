//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Every expected value is recomputed here from
//! first principles instead of reusing the library's own checkers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teleop_core::net::{run_robot_peer, serve_session, SessionCoreLink, TcpSessionClient};
use teleop_core::prototyper::{compose_app, parse_app, parse_descriptor, ComposeRequest, ModuleDescriptor, Selection};
use teleop_core::relay::{Delivery, DeliveryMode, Frame, Relay, RelayConfig};
use teleop_core::robot::{
    apply_assistance, evaluate_fixtures, CommandSource, DhTable, ExecutedCommand, FixtureRadii, IkParams, JointLimits,
    Kinematics, ReceiptStatus, RobotConfig, VirtualFixture,
};
use teleop_core::runtime::{BuiltinFactory, ControllerConfig, ModuleStatus, SignalKind, Variant};
use teleop_core::scenario::{parse_scenario, run_scenario, RunOptions, Scenario, ScenarioReport, Transport};
use teleop_core::session::{
    restore_world, ConnectedUser, ObjectState, Platform, SceneConfig, SessionConfig, ShareableObject, ValidationRecord, WorldSnapshot,
};
use teleop_core::wire::Body;
use teleop_core::{Core, Envelope, FileStore, JointConfig, Pose, RobotServer, SessionServer};

type Outcome = Result<String, String>;

/// Validation and execution logs of every stack run by the suite, for the
/// provenance criterion.
static RUNS: Mutex<Vec<(String, Vec<ValidationRecord>, Vec<ExecutedCommand>)>> = Mutex::new(Vec::new());

fn record_run(label: impl Into<String>, validations: Vec<ValidationRecord>, executed: Vec<ExecutedCommand>) {
    RUNS.lock().unwrap().push((label.into(), validations, executed));
}

fn record_report(report: &ScenarioReport) {
    record_run(
        format!("{} seed {} {:?}", report.name, report.seed, report.transport),
        report.validations.clone(),
        report.executed.clone(),
    );
}

fn scenario(file: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", file].iter().collect();
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_scenario(&text).unwrap_or_else(|e| panic!("{file}: {e}"))
}

fn run(s: &Scenario, seed: Option<u64>, transport: Transport) -> ScenarioReport {
    let options = RunOptions {
        seed,
        transport,
        ..RunOptions::default()
    };
    run_scenario(s, &options).unwrap_or_else(|e| panic!("{}: {e}", s.name))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "SAFE-4 degradation and recovery", criterion_1),
        (2, "lock storm consistency over 100 seeds", criterion_2),
        (4, "forward and inverse kinematics", criterion_4),
        (5, "virtual fixture hysteresis", criterion_5),
        (6, "relay isolation under a stalled client", criterion_6),
        (7, "hot-add during live traffic", criterion_7),
        (8, "prototyper round-trip and mutation rejection", criterion_8),
        (9, "persistence across restart", criterion_9),
        // Last: audits the commands executed by every run above.
        (3, "robot command provenance", criterion_3),
    ];
    let mut results: BTreeMap<u32, (&str, Outcome, Duration)> = BTreeMap::new();
    for (id, title, f) in criteria {
        let started = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        results.insert(id, (title, outcome, started.elapsed()));
    }
    let mut failed = 0;
    for (id, (title, outcome, took)) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {id}: {title} ({detail}) [{:.1}s]", took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id}: {title}: {detail} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

fn criterion_1() -> Outcome {
    let s = scenario("safe4.xml");
    let core = s.core.as_ref().ok_or("safe4 has no core section")?;
    let started = Instant::now();
    let report = run(&s, None, Transport::InProcess);
    let wall = started.elapsed();
    record_report(&report);

    // Baseline 10 ms, step to 300 ms at t = 5000: after n samples at 300 ms the
    // estimate is 300 - 290 (1 - beta)^n.
    let (beta, high) = (0.2f64, 200.0f64);
    let n = (1..).find(|&n| 300.0 - 290.0 * (1.0 - beta).powi(n) > high).unwrap() as u64;
    let crossing = 5000 + (n - 1) * core.probe_interval_ms;
    let period = core.controller.period_ms;

    let trace: Vec<(u64, u32)> = report
        .core_log
        .iter()
        .filter_map(|env| match &env.body {
            Body::ModuleSignal(b) if b.module == "camera" && b.signal.kind == SignalKind::Safe => {
                b.signal.degree.map(|d| (env.ts_ms, d))
            }
            _ => None,
        })
        .collect();
    let degrees: Vec<u32> = trace.iter().map(|(_, d)| *d).collect();
    ensure(degrees == [4, 3, 4, 5], || format!("SAFE sequence {degrees:?}, want [4, 3, 4, 5]"))?;
    let first = trace[0].0;
    ensure(first >= crossing && first <= crossing + 2 * period, || {
        format!("first SAFE at {first} ms, crossing at {crossing} ms")
    })?;
    // Recovery can only begin once the delay has dropped back.
    ensure(trace[2].0 > 6100, || format!("recovery SAFE at {} ms precedes the drop", trace[2].0))?;
    ensure(wall < Duration::from_secs(30), || format!("took {wall:?}"))?;
    Ok(format!(
        "trace {:?}, crossing {crossing} ms, wall {:.2}s",
        trace,
        wall.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2

/// Folds the messages one client received into the world it implies.
fn fold_world(log: &[Envelope]) -> Result<WorldSnapshot, String> {
    let mut objects: BTreeMap<String, ShareableObject> = BTreeMap::new();
    let mut users: BTreeMap<String, Platform> = BTreeMap::new();
    let mut world_seq = 0u64;
    let mut seeded = false;
    for env in log {
        match &env.body {
            Body::Snapshot(b) => {
                if let Some(snap) = &b.snapshot {
                    objects = snap.objects.iter().map(|o| (o.object_id.clone(), o.clone())).collect();
                    users = snap.connected_users.iter().map(|u| (u.user_id.clone(), u.platform)).collect();
                    world_seq = snap.world_seq;
                    seeded = true;
                }
            }
            Body::Join(b) => {
                let ws = b.world_seq.ok_or("JOIN broadcast without world_seq")?;
                let pid = format!("phantom:{}", b.user_id);
                if b.departed {
                    users.remove(&b.user_id);
                    objects.remove(&pid);
                } else {
                    users.insert(b.user_id.clone(), b.platform);
                    let phantom = b.phantom.clone().ok_or("JOIN broadcast without phantom")?;
                    objects.insert(pid, phantom);
                }
                world_seq = world_seq.max(ws);
            }
            Body::PhantomUpdate(b) => {
                let o = objects
                    .get_mut(&b.object_id)
                    .ok_or_else(|| format!("update for unknown {}", b.object_id))?;
                if b.world_seq > o.world_seq {
                    o.state = ObjectState::PhantomRobot { joints: b.joints };
                    o.world_seq = b.world_seq;
                }
                world_seq = world_seq.max(b.world_seq);
            }
            Body::LockGrant(b) => {
                let o = objects
                    .get_mut(&b.object_id)
                    .ok_or_else(|| format!("grant for unknown {}", b.object_id))?;
                if b.world_seq > o.world_seq {
                    o.owner = b.owner.clone();
                    o.world_seq = b.world_seq;
                }
                world_seq = world_seq.max(b.world_seq);
            }
            _ => {}
        }
    }
    if !seeded {
        return Err("no SNAPSHOT in log".into());
    }
    Ok(WorldSnapshot {
        world_seq,
        objects: objects.into_values().collect(),
        connected_users: users
            .into_iter()
            .map(|(user_id, platform)| ConnectedUser { user_id, platform })
            .collect(),
    })
}

/// Versions per object must strictly increase. A grant repeating the current
/// version and owner is a reentrant acknowledgment and is skipped.
fn ordering_violations(log: &[Envelope]) -> Vec<String> {
    let mut last: HashMap<String, (u64, Option<String>)> = HashMap::new();
    let mut out = Vec::new();
    for env in log {
        let (object, ws, owner) = match &env.body {
            Body::Snapshot(b) => {
                if let Some(s) = &b.snapshot {
                    for o in &s.objects {
                        last.insert(o.object_id.clone(), (o.world_seq, o.owner.clone()));
                    }
                }
                continue;
            }
            Body::PhantomUpdate(b) => (b.object_id.clone(), b.world_seq, None),
            Body::LockGrant(b) => (b.object_id.clone(), b.world_seq, Some(b.owner.clone())),
            Body::Join(b) if !b.departed => (format!("phantom:{}", b.user_id), b.world_seq.unwrap_or(0), None),
            _ => continue,
        };
        if let Some((prev, prev_owner)) = last.get(&object) {
            let reentrant = matches!(&owner, Some(o) if ws == *prev && o == prev_owner);
            if reentrant {
                continue;
            }
            if ws <= *prev {
                out.push(format!("{object}: version {ws} after {prev}"));
            }
        }
        let owner = match owner {
            Some(o) => o,
            None => last.get(&object).and_then(|(_, o)| o.clone()),
        };
        last.insert(object, (ws, owner));
    }
    out
}

fn gap_violations(log: &[Envelope]) -> Vec<String> {
    let mut next: HashMap<&str, u64> = HashMap::new();
    let mut out = Vec::new();
    for env in log {
        if let Some(expected) = next.get(env.sender.as_str()) {
            if env.seq != *expected {
                out.push(format!("from {}: seq {} where {} was due", env.sender, env.seq, expected));
            }
        }
        next.insert(&env.sender, env.seq + 1);
    }
    out
}

/// Grant history seen by one observer: an owned object is never handed to
/// someone else without a release in between.
fn handover_violations(log: &[Envelope]) -> Vec<String> {
    let mut owner: HashMap<String, Option<String>> = HashMap::new();
    let mut out = Vec::new();
    for env in log {
        if let Body::LockGrant(b) = &env.body {
            let current = owner.entry(b.object_id.clone()).or_default();
            if let (Some(a), Some(n)) = (current.as_ref(), b.owner.as_ref()) {
                if a != n {
                    out.push(format!("{} passed from {a} to {n} without release", b.object_id));
                }
            }
            *current = b.owner.clone();
        }
    }
    out
}

struct StormTally {
    contested_rounds: usize,
    updates: usize,
}

fn check_storm(report: &ScenarioReport, per_client: usize) -> Result<StormTally, String> {
    let tag = format!("seed {}", report.seed);
    ensure(report.outcomes[0].passed, || format!("{tag}: script failed: {}", report.outcomes[0].detail))?;
    ensure(report.client_logs.len() == 8, || format!("{tag}: {} clients", report.client_logs.len()))?;
    let mut updates = 0;
    for (user, log) in &report.client_logs {
        let own = format!("phantom:{user}");
        let acked = log
            .iter()
            .filter(|e| matches!(&e.body, Body::PhantomUpdate(b) if b.object_id == own))
            .count();
        ensure(acked >= per_client, || format!("{tag}: {user} saw {acked} of its updates"))?;
        updates += acked;

        let world = fold_world(log).map_err(|e| format!("{tag}: {user}: {e}"))?;
        ensure(world == report.final_snapshot, || {
            format!("{tag}: {user} diverged from the server world")
        })?;
        let v = ordering_violations(log);
        ensure(v.is_empty(), || format!("{tag}: {user}: {}", v[0]))?;
        let v = gap_violations(log);
        ensure(v.is_empty(), || format!("{tag}: {user}: {}", v[0]))?;
        let v = handover_violations(log);
        ensure(v.is_empty(), || format!("{tag}: {user}: {}", v[0]))?;
    }

    let mut rounds: BTreeMap<(&str, u64), Vec<&teleop_core::scenario::LockAttempt>> = BTreeMap::new();
    for a in &report.lock_attempts {
        rounds.entry((a.object_id.as_str(), a.at_ms)).or_default().push(a);
    }
    let mut contested = 0;
    for ((object, at), attempts) in &rounds {
        let grants = attempts.iter().filter(|a| a.granted).count();
        ensure(grants <= 1, || format!("{tag}: {object} granted {grants} times at {at} ms"))?;
        for a in attempts.iter().filter(|a| !a.granted) {
            // A denial must name a holder other than the requester.
            ensure(a.owner.as_ref().is_some_and(|o| *o != a.user_id), || {
                format!("{tag}: {} denied {object} at {at} ms without a holder", a.user_id)
            })?;
        }
        let requesters: BTreeSet<&str> = attempts.iter().map(|a| a.user_id.as_str()).collect();
        if requesters.len() >= 2 {
            contested += 1;
        }
    }
    Ok(StormTally {
        contested_rounds: contested,
        updates,
    })
}

fn criterion_2() -> Outcome {
    let s = scenario("lock-storm.xml");
    let per_client = 1000;
    let seeds: Vec<u64> = (1..=100).collect();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8);
    let queue = Arc::new(Mutex::new(seeds));
    let results = Arc::new(Mutex::new(Vec::new()));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let (queue, results, s) = (Arc::clone(&queue), Arc::clone(&results), &s);
            scope.spawn(move || loop {
                let Some(seed) = queue.lock().unwrap().pop() else { break };
                let report = run(s, Some(seed), Transport::InProcess);
                let tally = check_storm(&report, per_client);
                record_report(&report);
                results.lock().unwrap().push((seed, tally));
            });
        }
    });
    let mut results = std::mem::take(&mut *results.lock().unwrap());
    results.sort_by_key(|(seed, _)| *seed);
    ensure(results.len() == 100, || format!("{} runs finished", results.len()))?;
    let mut contested = 0;
    let mut updates = 0;
    for (_, tally) in results {
        let t = tally?;
        contested += t.contested_rounds;
        updates += t.updates;
    }
    ensure(contested > 0, || "no contested lock rounds occurred".into())?;
    Ok(format!(
        "100 runs, {updates} phantom updates acknowledged, {contested} contested rounds"
    ))
}

// ---------------------------------------------------------------------------
// 3

fn provenance_problems(label: &str, validations: &[ValidationRecord], executed: &[ExecutedCommand]) -> Vec<String> {
    let mut out = Vec::new();
    let accepted: Vec<&ValidationRecord> = validations
        .iter()
        .filter(|v| matches!(&v.outcome, Ok(r) if r.status == ReceiptStatus::Accepted))
        .collect();
    if accepted.len() != executed.len() {
        out.push(format!(
            "{label}: {} accepted requests, {} executed commands",
            accepted.len(),
            executed.len()
        ));
    }
    let mut seen_ids = BTreeSet::new();
    for cmd in executed {
        if !seen_ids.insert(cmd.command_id) {
            out.push(format!("{label}: command {} executed twice", cmd.command_id));
        }
        if !cmd.completed {
            out.push(format!("{label}: command {} never completed", cmd.command_id));
        }
        let matches: Vec<&&ValidationRecord> = accepted
            .iter()
            .filter(|v| matches!(&v.outcome, Ok(r) if r.command_id == Some(cmd.command_id)))
            .collect();
        match matches.as_slice() {
            [v] => {
                let same = v.request_id == cmd.origin.request_id
                    && v.user_id == cmd.origin.user_id
                    && v.source == cmd.origin.source
                    && v.waypoints == cmd.waypoints;
                if !same {
                    out.push(format!("{label}: command {} differs from its request", cmd.command_id));
                }
            }
            other => out.push(format!(
                "{label}: command {} matches {} accepted requests",
                cmd.command_id,
                other.len()
            )),
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let collab = scenario("collaborate-and-validate.xml");
    for transport in [Transport::InProcess, Transport::Tcp] {
        let report = run(&collab, None, transport);
        ensure(report.passed(), || {
            format!("collaborate ({transport:?}) failed: {:?}", report.failures().collect::<Vec<_>>())
        })?;
        ensure(report.executed.len() == 1, || {
            format!("collaborate ({transport:?}) executed {} commands", report.executed.len())
        })?;
        record_report(&report);
    }
    let runs = RUNS.lock().unwrap();
    let mut problems = Vec::new();
    let mut commands = 0;
    let mut trajectories = 0;
    for (label, validations, executed) in runs.iter() {
        problems.extend(provenance_problems(label, validations, executed));
        commands += executed.len();
        trajectories += executed
            .iter()
            .filter(|c| c.origin.source == CommandSource::Trajectory)
            .count();
    }
    ensure(problems.is_empty(), || problems.join("; "))?;
    ensure(commands > 0, || "no robot commands were executed".into())?;
    Ok(format!(
        "{} runs, {commands} executed commands ({trajectories} trajectories), all traced to one accepted request",
        runs.len()
    ))
}

// ---------------------------------------------------------------------------
// 4

type Mat4 = [[f64; 4]; 4];

fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Standard DH link: Rz(theta) Tz(d) Tx(a) Rx(alpha).
fn dh_link(a: f64, d: f64, alpha: f64, theta: f64) -> Mat4 {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn oracle_fk(dh: &DhTable, q: &[f64; 6]) -> Mat4 {
    let mut t = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    for i in 0..6 {
        t = mat_mul(&t, &dh_link(dh.a[i], dh.d[i], dh.alpha[i], q[i]));
    }
    t
}

/// Rotation matrix of a (w, x, y, z) unit quaternion.
fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_config(rng: &mut ChaCha8Rng, limits: &JointLimits) -> JointConfig {
    let mut q = [0.0; 6];
    for (i, v) in q.iter_mut().enumerate() {
        *v = rng.random_range(limits.lower[i]..=limits.upper[i]);
    }
    JointConfig(q)
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let config = RobotConfig::default();
    let kin = Kinematics::new(config.dh.clone(), config.limits.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut worst_fk = 0.0f64;
    for _ in 0..10_000 {
        let q = random_config(&mut rng, &config.limits);
        let want = oracle_fk(&config.dh, &q.0);
        let pose = kin.forward(&q);
        let rot = quat_matrix(pose.orientation);
        for i in 0..3 {
            worst_fk = worst_fk.max((pose.position[i] - want[i][3]).abs());
            for j in 0..3 {
                worst_fk = worst_fk.max((rot[i][j] - want[i][j]).abs());
            }
        }
    }
    ensure(worst_fk <= 1e-12, || format!("FK deviates by {worst_fk:e}"))?;

    let params = IkParams::default();
    let (mut worst_p, mut worst_r) = (0.0f64, 0.0f64);
    for k in 0..1000 {
        let q = random_config(&mut rng, &config.limits);
        let target = oracle_fk(&config.dh, &q.0);
        let target_pose = kin.forward(&q);
        let solved = kin
            .inverse(&target_pose, &JointConfig::HOME, &params)
            .map_err(|e| format!("target {k}: {e}"))?;
        ensure(config.limits.contains(&solved), || format!("target {k}: solution outside limits"))?;
        let got = oracle_fk(&config.dh, &solved.0);
        let dp = (0..3).map(|i| (got[i][3] - target[i][3]).powi(2)).sum::<f64>().sqrt();
        // |R1 - R2|_F = 2 sqrt(2) sin(angle / 2), precise for small angles.
        let fro = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (got[i][j] - target[i][j]).powi(2))
            .sum::<f64>()
            .sqrt();
        let angle = 2.0 * (fro / (2.0 * 2f64.sqrt())).min(1.0).asin();
        ensure(dp < 1e-6 && angle < 1e-6, || {
            format!("target {k}: residual {dp:e} m / {angle:e} rad")
        })?;
        worst_p = worst_p.max(dp);
        worst_r = worst_r.max(angle);
    }
    let took = started.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "FK max error {worst_fk:.1e} over 10000 configs, IK worst {worst_p:.1e} m / {worst_r:.1e} rad over 1000 targets"
    ))
}

// ---------------------------------------------------------------------------
// 5

fn criterion_5() -> Outcome {
    let radii = FixtureRadii::default();
    let hole = vec![ShareableObject::scene("hole", Pose::from_translation([0.0, 0.0, 0.0]))];
    let sweep: Vec<u32> = (50..=200).rev().chain(51..=200).collect();
    let mut fixtures: Vec<VirtualFixture> = Vec::new();
    let mut active = false;
    let mut transitions = Vec::new();
    for mm in sweep {
        let peg = Pose::from_translation([mm as f64 / 1000.0, 0.0, 0.0]);
        fixtures = evaluate_fixtures(&peg, &hole, &fixtures, radii);
        let now = fixtures[0].active;
        if now != active {
            transitions.push((mm, now));
            active = now;
        }
    }
    ensure(transitions == [(99, true), (151, false)], || {
        format!("transitions {transitions:?}, want activation at 99 mm and release at 151 mm")
    })?;

    // Inactive fixtures must leave commands bit-for-bit untouched.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let peg = Pose::from_translation([0.2, 0.0, 0.0]);
    let idle = evaluate_fixtures(&peg, &hole, &[], radii);
    ensure(!idle[0].active, || "fixture active at 200 mm".into())?;
    for _ in 0..10_000 {
        let cmd: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for set in [&idle[..], &[]] {
            let out = apply_assistance(cmd, &peg, set);
            ensure(out.iter().zip(&cmd).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("command {cmd:?} changed to {out:?} with no active fixture")
            })?;
        }
    }
    Ok("activated at 99 mm, released at 151 mm, 10000 idle commands bit-identical".into())
}

// ---------------------------------------------------------------------------
// 6

fn drain(endpoint: &teleop_core::relay::ClientEndpoint) -> Vec<u64> {
    let mut seqs = Vec::new();
    while let Some(d) = endpoint.try_recv() {
        if let Delivery::Frame(f) = d {
            seqs.push(f.frame_seq);
        }
    }
    seqs
}

fn criterion_6() -> Outcome {
    let relay = Relay::new(RelayConfig {
        queue_bound: 8,
        ..RelayConfig::default()
    });
    relay.register_source("cam", 30.0).map_err(|e| e.to_string())?;
    let stalled = relay.connect("stalled").map_err(|e| e.to_string())?;
    let healthy = relay.connect("healthy").map_err(|e| e.to_string())?;
    relay
        .subscribe("stalled", "cam", DeliveryMode::Unicast, None)
        .map_err(|e| e.to_string())?;
    relay
        .subscribe("healthy", "cam", DeliveryMode::Unicast, None)
        .map_err(|e| e.to_string())?;

    let reader = std::thread::spawn(move || {
        let mut seqs = Vec::new();
        while seqs.len() < 100 {
            match healthy.recv_timeout(Duration::from_secs(5)) {
                Some(Delivery::Frame(f)) => seqs.push(f.frame_seq),
                Some(_) => {}
                None => break,
            }
        }
        seqs
    });
    let mut worst_push = Duration::ZERO;
    for seq in 1..=100u64 {
        let t = Instant::now();
        relay
            .push_frame(Frame::synthetic("cam", seq, seq, 4096))
            .map_err(|e| e.to_string())?;
        worst_push = worst_push.max(t.elapsed());
        std::thread::sleep(Duration::from_millis(1));
    }
    let healthy_seqs = reader.join().map_err(|_| "healthy reader panicked")?;
    ensure(healthy_seqs == (1..=100).collect::<Vec<_>>(), || {
        format!("healthy client got {} frames", healthy_seqs.len())
    })?;

    let got = drain(&stalled);
    let stats = relay.stats("stalled", "cam").ok_or("no stats for stalled client")?;
    ensure(got == (93..=100).collect::<Vec<_>>(), || format!("stalled client kept {got:?}"))?;
    ensure(stats.delivered + stats.dropped == 100, || {
        format!("delivered {} + dropped {} != 100", stats.delivered, stats.dropped)
    })?;
    ensure(stats.delivered == got.len() as u64, || "delivered count disagrees with frames popped".into())?;
    ensure(worst_push < Duration::from_millis(20), || format!("push took {worst_push:?}"))?;

    // Multicast members that keep up see the same frames.
    relay.register_source("wide", 30.0).map_err(|e| e.to_string())?;
    let members: Vec<_> = (0..3)
        .map(|i| {
            let id = format!("member{i}");
            let ep = relay.connect(&id).unwrap();
            relay
                .subscribe(&id, "wide", DeliveryMode::MulticastGroup, Some("g"))
                .unwrap();
            ep
        })
        .collect();
    let mut seen: Vec<Vec<u64>> = vec![Vec::new(); members.len()];
    for seq in 500..600u64 {
        relay
            .push_frame(Frame::synthetic("wide", seq, seq, 512))
            .map_err(|e| e.to_string())?;
        for (ep, s) in members.iter().zip(seen.iter_mut()) {
            s.extend(drain(ep));
        }
    }
    ensure(seen.iter().all(|s| *s == (500..600).collect::<Vec<_>>()), || {
        format!("member frame counts {:?}", seen.iter().map(Vec::len).collect::<Vec<_>>())
    })?;
    Ok(format!(
        "stalled: {} delivered + {} dropped, healthy got 100/100, worst push {:?}, 3 multicast members identical",
        stats.delivered, stats.dropped, worst_push
    ))
}

// ---------------------------------------------------------------------------
// 7

fn trajectory_descriptor() -> ModuleDescriptor {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "docs", "xml", "module-trajectory.xml"]
        .iter()
        .collect();
    parse_descriptor(&std::fs::read_to_string(path).expect("descriptor file")).expect("valid descriptor")
}

fn criterion_7() -> Outcome {
    for transport in [Transport::InProcess, Transport::Tcp] {
        let report = run(&scenario("hot-add.xml"), None, transport);
        ensure(report.passed(), || {
            format!("hot-add.xml ({transport:?}): {:?}", report.failures().collect::<Vec<_>>())
        })?;
        record_report(&report);
    }

    let server = Arc::new(SessionServer::new(SessionConfig::default()));
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    serve_session(Arc::clone(&server), listener);
    let robot = Arc::new(RobotServer::new(RobotConfig::default()));
    let peer = run_robot_peer(Arc::clone(&robot), addr, "robot").map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(5);
    while !server.has_robot() {
        ensure(Instant::now() < deadline, || "robot never attached".into())?;
        std::thread::sleep(Duration::from_millis(5));
    }

    let mut operator = TcpSessionClient::connect(addr, "operator", Platform::Web).map_err(|e| e.to_string())?;
    let storm_for = Duration::from_millis(2000);
    let stormers: Vec<_> = (0..4)
        .map(|i| {
            std::thread::spawn(move || -> Result<TcpSessionClient, String> {
                let mut c = TcpSessionClient::connect(addr, &format!("storm{i}"), Platform::Vr)
                    .map_err(|e| e.to_string())?;
                let mut rng = ChaCha8Rng::seed_from_u64(70 + i);
                let limits = JointLimits::default();
                let start = Instant::now();
                let mut next = start;
                while start.elapsed() < storm_for {
                    c.update_phantom(random_config(&mut rng, &limits)).map_err(|e| e.to_string())?;
                    next += Duration::from_millis(10);
                    std::thread::sleep(next.saturating_duration_since(Instant::now()));
                }
                Ok(c)
            })
        })
        .collect();

    std::thread::sleep(Duration::from_millis(700));
    let link = Arc::new(SessionCoreLink::connect(addr).map_err(|e| e.to_string())?);
    let mut core = Core::new(
        ControllerConfig::default(),
        Box::new(BuiltinFactory {
            robot: Some(link),
            ..BuiltinFactory::default()
        }),
    );
    let added_at = Instant::now();
    let loaded = core
        .hot_add(&trajectory_descriptor(), Variant::Classic, None)
        .map_err(|e| e.to_string())?;
    ensure(loaded.status != ModuleStatus::Failed, || format!("hot-add failed: {}", loaded.detail))?;
    let waypoints = vec![
        JointConfig([0.1, -0.1, 0.1, 0.0, 0.1, 0.0]),
        JointConfig([0.2, -0.2, 0.1, 0.1, 0.0, 0.0]),
    ];
    let receipt = operator.trajectory(waypoints.clone()).map_err(|e| e.to_string())?;
    let to_accept = added_at.elapsed();
    ensure(receipt.status == ReceiptStatus::Accepted, || format!("trajectory receipt {receipt:?}"))?;

    let mut stormers_done = Vec::new();
    for h in stormers {
        stormers_done.push(h.join().map_err(|_| "storm client panicked")??);
    }
    let final_seq = server.world_seq();
    let mut messages = 0;
    for c in stormers_done.iter_mut().chain(std::iter::once(&mut operator)) {
        ensure(c.wait_for_world_seq(final_seq, Duration::from_secs(10)), || {
            format!("{} never caught up", c.user_id())
        })?;
        let gaps = gap_violations(c.log());
        ensure(gaps.is_empty(), || format!("{}: {}", c.user_id(), gaps[0]))?;
        let errors = c.log().iter().filter(|e| matches!(e.body, Body::Error(_))).count();
        ensure(errors == 0, || format!("{}: {errors} ERROR replies", c.user_id()))?;
        messages += c.log().len();
    }

    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let done = robot.executed_log().iter().all(|c| c.completed) && robot.is_idle();
        if done {
            break;
        }
        ensure(Instant::now() < deadline, || "trajectory never completed".into())?;
        std::thread::sleep(Duration::from_millis(20));
    }
    let executed = robot.executed_log();
    ensure(
        executed.len() == 1 && executed[0].waypoints == waypoints,
        || format!("robot executed {executed:?}"),
    )?;
    record_run("tcp hot-add storm", server.validation_log(), executed);
    peer.stop();
    Ok(format!(
        "hot-add.xml passes in both transports; live: trajectory accepted {:.0} ms after hot-add, {messages} messages without gaps",
        to_accept.as_secs_f64() * 1000.0
    ))
}

// ---------------------------------------------------------------------------
// 8

const OPTION_ALPHABET: &[char] = &['a', 'Z', '0', ' ', '&', '<', '>', '"', '\'', '=', '/', 'é', '-', '_'];

fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| OPTION_ALPHABET[rng.random_range(0..OPTION_ALPHABET.len())])
        .collect()
}

fn random_registry(rng: &mut ChaCha8Rng) -> Vec<ModuleDescriptor> {
    let mut registry = Vec::new();
    for i in 0..8 {
        let variants: &[Variant] = match rng.random_range(0..3) {
            0 => &[Variant::Classic],
            1 => &[Variant::Mobile],
            _ => &[Variant::Classic, Variant::Mobile],
        };
        for version in ["1.0", "1.2", "2.0"].iter().take(rng.random_range(1..=3)) {
            let mut d = ModuleDescriptor::new(format!("mod{i}"), *version, variants);
            if rng.random_bool(0.5) {
                let max = rng.random_range(1..=6);
                d = d.degradable(&format!("unit{i}"), max, rng.random_range(0..=max));
            }
            registry.push(d);
        }
    }
    registry
}

fn random_request(rng: &mut ChaCha8Rng, registry: &[ModuleDescriptor]) -> ComposeRequest {
    let platform = [Platform::Web, Platform::Vr, Platform::Mobile][rng.random_range(0..3)];
    let mut names: Vec<&str> = registry.iter().map(|d| d.name.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    // Random subset in random order.
    let mut selection = Vec::new();
    while !names.is_empty() && rng.random_bool(0.7) {
        let name = names.remove(rng.random_range(0..names.len()));
        let newest = registry
            .iter()
            .filter(|d| d.name == name)
            .max_by(|a, b| teleop_core::prototyper::compare_versions(&a.version, &b.version))
            .unwrap();
        let allowed: Vec<Variant> = newest
            .variants
            .iter()
            .copied()
            .filter(|v| platform != Platform::Mobile || *v == Variant::Mobile)
            .collect();
        if allowed.is_empty() {
            continue;
        }
        let variant = allowed[rng.random_range(0..allowed.len())];
        let units = rng.random_bool(0.5).then(|| rng.random_range(0..=newest.max_units));
        selection.push(Selection::new(name, variant, units));
    }
    let options = (0..rng.random_range(0..4))
        .map(|k| (format!("opt{k}"), random_text(rng, 0, 12)))
        .collect();
    ComposeRequest {
        name: random_text(rng, 1, 10),
        platform,
        options,
        selection,
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let registry = random_registry(&mut rng);
    let mut modules = 0;
    for k in 0..500 {
        let request = random_request(&mut rng, &registry);
        let xml = compose_app(&registry, &request).map_err(|e| format!("selection {k}: {e}"))?;
        let spec = parse_app(&xml).map_err(|e| format!("selection {k}: {e}\n{xml}"))?;
        ensure(spec.to_xml() == xml, || format!("selection {k}: re-serialization differs"))?;
        ensure(spec.name == request.name && spec.options == request.options, || {
            format!("selection {k}: name or options changed")
        })?;
        modules += spec.modules.len();
    }

    // Every single-character edit of an attribute name must be rejected.
    let valid = r#"<module name="camera" version="1.0">
  <variants>
    <variant>CLASSIC</variant>
  </variants>
  <methods>
    <method name="set_rate">
      <arg name="fps" type="int"/>
    </method>
  </methods>
  <degradation degradable="true" unit="camera" max-units="5" default-units="5"/>
</module>"#;
    parse_descriptor(valid).map_err(|e| format!("baseline descriptor: {e}"))?;
    let bytes: Vec<char> = valid.chars().collect();
    let mut spans = Vec::new();
    for i in 0..bytes.len().saturating_sub(1) {
        if bytes[i] == '=' && bytes[i + 1] == '"' {
            let mut start = i;
            while start > 0 && (bytes[start - 1].is_ascii_lowercase() || bytes[start - 1] == '-') {
                start -= 1;
            }
            spans.push((start, i));
        }
    }
    let alphabet: Vec<char> = ('a'..='z').chain(std::iter::once('-')).collect();
    let mut mutations = 0;
    let mut accepted = Vec::new();
    let mut try_text = |text: String, what: String| {
        mutations += 1;
        if parse_descriptor(&text).is_ok() {
            accepted.push(what);
        }
    };
    for &(start, end) in &spans {
        let name: String = bytes[start..end].iter().collect();
        for pos in start..end {
            for &c in &alphabet {
                if c != bytes[pos] {
                    let mut m = bytes.clone();
                    m[pos] = c;
                    try_text(m.into_iter().collect(), format!("{name}: substitute {c} at {}", pos - start));
                }
            }
            let mut m = bytes.clone();
            m.remove(pos);
            try_text(m.into_iter().collect(), format!("{name}: delete at {}", pos - start));
        }
        for pos in start..=end {
            for &c in &alphabet {
                let mut m = bytes.clone();
                m.insert(pos, c);
                try_text(m.into_iter().collect(), format!("{name}: insert {c} at {}", pos - start));
            }
        }
    }
    ensure(accepted.is_empty(), || format!("accepted mutations: {:?}", accepted))?;
    Ok(format!(
        "500 compositions ({modules} modules) byte-exact, {mutations} attribute-name mutations over {} attributes rejected",
        spans.len()
    ))
}

// ---------------------------------------------------------------------------
// 9

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("world.store");
    let config = SessionConfig {
        limits: JointLimits::default(),
        scene: SceneConfig {
            objects: vec![
                ShareableObject::scene("peg", Pose::from_translation([0.4, 0.0, 0.1])),
                ShareableObject::scene("hole", Pose::new([0.45, 0.1, 0.05], [0.0, 0.0, 0.0, 1.0])),
            ],
        },
    };
    let expected = {
        let server = SessionServer::new(config.clone());
        let a = server.join("alice", Platform::Web).map_err(|e| e.to_string())?;
        let b = server.join("bob", Platform::Vr).map_err(|e| e.to_string())?;
        let c = server.join("carol", Platform::Mobile).map_err(|e| e.to_string())?;
        server
            .update_phantom(&a.session_id, JointConfig([0.1, 0.2, -0.3, 0.4, 0.5, 1.0 / 3.0]))
            .map_err(|e| e.to_string())?;
        server
            .update_phantom(&b.session_id, JointConfig([-0.7, 0.0, 0.1, 0.0, 1e-9, 2.5]))
            .map_err(|e| e.to_string())?;
        server.acquire_lock(&b.session_id, "peg").map_err(|e| e.to_string())?;
        server.acquire_lock(&c.session_id, "hole").map_err(|e| e.to_string())?;
        server.disconnect(&c.session_id).map_err(|e| e.to_string())?;
        server
            .persist_world(&FileStore::new(&path))
            .map_err(|e| e.to_string())?;
        server.snapshot()
        // The server is dropped here without any shutdown step.
    };
    ensure(expected.connected_users.len() == 2, || "fixture world is wrong".into())?;

    let snap = restore_world(&FileStore::new(&path))
        .map_err(|e| e.to_string())?
        .ok_or("store is empty")?;
    ensure(snap == expected, || {
        format!("restored snapshot differs:\n{}\n{}", snap.canonical_json(), expected.canonical_json())
    })?;
    ensure(snap.canonical_json() == expected.canonical_json(), || {
        "restored canonical JSON differs".into()
    })?;
    // A restarted server holds the same objects; the sessions themselves died
    // with the old process.
    let restored = SessionServer::restore(config.clone(), &FileStore::new(&path)).map_err(|e| e.to_string())?;
    let live = restored.snapshot();
    ensure(live.objects == expected.objects && live.world_seq == expected.world_seq, || {
        "restarted server world differs".into()
    })?;
    // The version counter continues where it stopped.
    restored.join("dave", Platform::Web).map_err(|e| e.to_string())?;
    ensure(restored.world_seq() > expected.world_seq, || "world_seq went backwards".into())?;

    let full = std::fs::read(&path).map_err(|e| e.to_string())?;
    let cut = dir.path().join("cut.store");
    let mut refused = 0;
    for len in 0..full.len() {
        std::fs::write(&cut, &full[..len]).map_err(|e| e.to_string())?;
        match SessionServer::restore(config.clone(), &FileStore::new(&cut)) {
            Err(_) => refused += 1,
            Ok(_) => return Err(format!("restore accepted a {len}-byte prefix of {} bytes", full.len())),
        }
    }
    Ok(format!(
        "world_seq {} restored exactly, all {refused} truncated prefixes refused",
        expected.world_seq
    ))
}
