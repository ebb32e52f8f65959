//! Seeded inputs shared by the benchmarks.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use discurate::geometry::{Obb7, Point3, Vec2};
use discurate::referring::DescriptorMap;
use discurate::ObjectId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cloud(n: usize, seed: u64) -> Vec<Vec2> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec2::new(r.gen_range(-2.0..2.0), r.gen_range(-0.5..0.5)).rotate(0.4))
        .collect()
}

/// Two rotated boxes about a meter apart.
pub fn box_pair(seed: u64) -> (Obb7, Obb7) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |x: f64| {
        Obb7::new(
            Point3::new(x, r.gen_range(-0.2..0.2), 0.5),
            [
                r.gen_range(0.3..1.0),
                r.gen_range(0.3..1.0),
                r.gen_range(0.3..1.0),
            ],
            r.gen_range(-PI..PI),
        )
        .expect("finite box")
    };
    (mk(0.0), mk(2.0))
}

pub fn descriptor_map(
    members: u32,
    descriptors: usize,
    seed: u64,
) -> (BTreeSet<ObjectId>, DescriptorMap) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: BTreeSet<ObjectId> = (0..members).map(ObjectId).collect();
    let map = (0..descriptors)
        .map(|d| {
            (
                format!("descriptor {d}"),
                ids.iter().copied().filter(|_| r.gen_bool(0.5)).collect(),
            )
        })
        .collect();
    (ids, map)
}
