use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use teleop_bench::{joint_grid, phantom_envelope};
use teleop_core::relay::{DeliveryMode, Frame, Relay, RelayConfig};
use teleop_core::robot::{IkParams, JointConfig, Kinematics, RobotConfig};
use teleop_core::wire::{decode_frame, encode_frame};

fn kinematics(c: &mut Criterion) {
    let cfg = RobotConfig::default();
    let kin = Kinematics::new(cfg.dh.clone(), cfg.limits.clone());
    let grid = joint_grid(256);
    let mut i = 0;
    c.bench_function("forward", |b| {
        b.iter(|| {
            i = (i + 1) % grid.len();
            kin.forward(black_box(&grid[i]))
        })
    });

    // Targets near the seed: the common teleoperation case.
    let targets: Vec<_> = grid
        .iter()
        .map(|q| {
            let mut near = JointConfig::HOME;
            for (n, v) in near.0.iter_mut().zip(q.0) {
                *n += 0.1 * v;
            }
            kin.forward(&near)
        })
        .collect();
    let params = IkParams::default();
    let mut i = 0;
    c.bench_function("inverse_near_home", |b| {
        b.iter(|| {
            i = (i + 1) % targets.len();
            kin.inverse(black_box(&targets[i]), &JointConfig::HOME, &params)
        })
    });
}

fn wire(c: &mut Criterion) {
    let env = phantom_envelope(42);
    let bytes = encode_frame(&env).unwrap();
    c.bench_function("encode_frame", |b| b.iter(|| encode_frame(black_box(&env)).unwrap()));
    c.bench_function("decode_frame", |b| b.iter(|| decode_frame(black_box(&bytes)).unwrap()));
}

fn relay(c: &mut Criterion) {
    for subscribers in [1usize, 8] {
        c.bench_function(&format!("relay_push_64k_x{subscribers}"), |b| {
            b.iter_batched(
                || {
                    let relay = Relay::new(RelayConfig::default());
                    relay.register_source("cam", 30.0).unwrap();
                    let endpoints: Vec<_> = (0..subscribers)
                        .map(|n| {
                            let id = format!("viewer{n}");
                            let ep = relay.connect(&id).unwrap();
                            relay.subscribe(&id, "cam", DeliveryMode::Unicast, None).unwrap();
                            ep
                        })
                        .collect();
                    let frames: Vec<_> = (0..32).map(|s| Frame::synthetic("cam", s, s, 64 * 1024)).collect();
                    (relay, endpoints, frames)
                },
                |(relay, endpoints, frames)| {
                    for f in frames {
                        relay.push_frame(f).unwrap();
                    }
                    endpoints
                },
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, kinematics, wire, relay);
criterion_main!(benches);
