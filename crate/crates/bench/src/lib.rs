//! Input builders shared by the benchmarks.

use teleop_core::robot::JointConfig;
use teleop_core::wire::{Body, Envelope, PhantomUpdateBody};

/// A deterministic spread of joint configurations inside the limits.
pub fn joint_grid(n: usize) -> Vec<JointConfig> {
    (0..n)
        .map(|i| {
            let mut q = [0.0; 6];
            for (j, v) in q.iter_mut().enumerate() {
                let phase = (i * 7 + j * 13) as f64 * 0.37;
                *v = 2.5 * phase.sin();
            }
            JointConfig(q)
        })
        .collect()
}

pub fn phantom_envelope(seq: u64) -> Envelope {
    Envelope::new(
        "bench",
        seq,
        seq * 10,
        Body::PhantomUpdate(PhantomUpdateBody {
            object_id: "phantom:bench".into(),
            joints: joint_grid(1)[0],
            world_seq: seq,
        }),
    )
}
